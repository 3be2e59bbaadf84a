"""Regenerates protocol_vectors.json from an independent Python implementation
of the canonical request form. Run from this directory: python3 gen_vectors.py
"""
import base64
import hashlib
import json

STUB_POS = b"SMSSTUB1\x01" + bytes(range(16))
STUB_NEG = b"SMSSTUB1\x00" + bytes(range(100, 116))


def canonical(req):
    image = None
    if req.get("image") is not None:
        img = req["image"]
        data = base64.b64decode(img["data"])
        image = {"media_type": img["media_type"], "sha256": hashlib.sha256(data).hexdigest()}
    form = {
        "candidate_tokens": req["candidate_tokens"],
        "image": image,
        "instruction": req["instruction"],
        "text": req.get("text"),
    }
    return json.dumps(form, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def inline(media_type, data):
    return {"mode": "inline-base64", "media_type": media_type, "data": base64.b64encode(data).decode()}


def request(rid, text, image, instruction="Is the finding present? Answer yes or no.",
            candidates=("yes", "no"), attention=False):
    return {
        "request_id": rid,
        "instruction": instruction,
        "text": text,
        "image": image,
        "candidate_tokens": list(candidates),
        "return_attention": attention,
    }


requests = [
    ("text_only", request("v1", "finding:positive", None)),
    ("text_only_other_id", request("another-id", "finding:positive", None, attention=True)),
    ("image_only", request("v2", None, inline("application/x-sms-stub", STUB_POS))),
    ("both", request("v3", "age: 61\nNotes 3: finding:negative.", inline("application/x-sms-stub", STUB_NEG))),
    ("same_bytes_other_media_type", request("v4", None, inline("image/png", STUB_POS))),
    ("non_ascii_and_escapes", request("v5", "Åsa \"q\" back\\slash\ttab \u0001 ✓", None, instruction="Ja eller nej?")),
    ("custom_candidates", request("v6", "finding:positive", None, candidates=("Yes", "No"))),
]

vectors = {
    "requests": [
        {"name": name, "request": req, "canonical_form": canonical(req),
         "sha256": hashlib.sha256(canonical(req).encode()).hexdigest()}
        for name, req in requests
    ],
    "invalid_requests": [
        {"name": "no_modality", "request": request("x1", None, None)},
        {"name": "one_candidate", "request": request("x2", "t", None, candidates=("yes",))},
        {"name": "duplicate_candidates", "request": request("x3", "t", None, candidates=("yes", "yes"))},
    ],
    "responses": [
        {"name": "plain", "valid": True, "response": {
            "request_id": "v1", "generated_text": "Yes.", "first_token_logits": {"yes": 4.0, "no": 0.0}}},
        {"name": "null_attention", "valid": True, "response": {
            "request_id": "v1", "generated_text": "No.", "first_token_logits": {"yes": -1.5, "no": 2.25},
            "attention": None}},
        {"name": "with_attention", "valid": True, "response": {
            "request_id": "v1", "generated_text": "Yes", "first_token_logits": {"yes": 1.0, "no": 0.0},
            "attention": {"n_text": 2, "n_image": 1, "roles": ["bos", "text", "text", "image"],
                          "rows": [[0.5, 0.2, 0.1, 0.2]], "tokens": ["Yes"]}}},
        {"name": "missing_logits", "valid": False, "response": {
            "request_id": "v1", "generated_text": "Yes."}},
        {"name": "attention_row_length", "valid": False, "response": {
            "request_id": "v1", "generated_text": "Yes", "first_token_logits": {"yes": 1.0, "no": 0.0},
            "attention": {"n_text": 1, "n_image": 1, "roles": ["bos", "text", "image"],
                          "rows": [[0.5, 0.5]], "tokens": ["Yes"]}}},
        {"name": "attention_negative_weight", "valid": False, "response": {
            "request_id": "v1", "generated_text": "Yes", "first_token_logits": {"yes": 1.0, "no": 0.0},
            "attention": {"n_text": 1, "n_image": 1, "roles": ["bos", "text", "image"],
                          "rows": [[0.5, -0.1, 0.6]], "tokens": ["Yes"]}}},
        {"name": "attention_role_count", "valid": False, "response": {
            "request_id": "v1", "generated_text": "Yes", "first_token_logits": {"yes": 1.0, "no": 0.0},
            "attention": {"n_text": 2, "n_image": 1, "roles": ["bos", "text", "image"],
                          "rows": [[0.5, 0.2, 0.3]], "tokens": ["Yes"]}}},
    ],
}

with open("protocol_vectors.json", "w", encoding="utf-8") as f:
    json.dump(vectors, f, indent=2, ensure_ascii=False)
    f.write("\n")
