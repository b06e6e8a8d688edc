"""A deterministic stand-in for a chat-completions server.

Answers are derived from the called names in the instruction under review,
looked up in the bundled static mapping and lifted to the unified
taxonomy, with a few deliberate formatting quirks so label normalisation
gets exercised.  Responses depend only on the request body.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re

import httpx

from pipestages.taxonomy import data_path

_CODE_TO_UNIFIED = {
    "1": "Acquisition",
    "2": "Data Preprocessing",
    "3": "Save Results",
    "4": "Data Exploration",
    "5": "Modeling",
    "6": "Modeling",
    "7": "Evaluation",
    "8": "Prediction",
    "9": "Interpretation",
    "10": "Communication",
    "11": "Deployment",
}


def _mapping() -> dict[str, str]:
    with open(data_path("stages.csv"), newline="") as fh:
        return {row["name"]: row["stage"] for row in csv.DictReader(fh)}


MAPPING = _mapping()


def _digest(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:12], 16)


def instruction_of(prompt: str) -> str:
    blocks = re.findall(r"```python\n(.*?)\n```", prompt, re.S)
    return blocks[-1] if blocks else ""


def answer_for(instruction: str) -> tuple[str, str]:
    """(completion text, finish reason)."""
    h = _digest(instruction)
    if instruction.lstrip().startswith("while "):
        return "The loop keeps going until the condition", "stop"
    if instruction.lstrip().startswith(("def ", "class ", "@", "async def ")):
        base = "Helper Functions"
    else:
        base = None
        for name in re.findall(r"([A-Za-z_]\w*)\s*\(", instruction):
            code = MAPPING.get(name)
            if code:
                base = _CODE_TO_UNIFIED[code]
                break
        if base is None:
            base = "Comment Only" if instruction.lstrip().startswith("#") else None
    if base is None:
        return "not sure", "stop"
    quirk = h % 7
    if quirk == 1:
        return f" {base.lower()}.", "stop"
    if quirk == 2:
        return f'"{base}"', "stop"
    if quirk == 3 and base == "Data Exploration":
        return "EDA", "stop"
    if quirk == 4 and h % 3 == 0:
        # a plausible wrong answer, so evaluation has something to find
        return "Evaluation" if base != "Evaluation" else "Prediction", "stop"
    return base, "stop"


def _tokens(text: str) -> list[str]:
    return re.findall(r"\w+|[^\w\s]", text)


def handler(request: httpx.Request) -> httpx.Response:
    body = json.loads(request.content)
    if request.url.path == "/tokenize":
        return httpx.Response(200, json={"tokens": list(range(len(_tokens(body["prompt"]))))})
    if request.url.path != "/v1/chat/completions":
        return httpx.Response(404, json={"error": "not found"})
    prompt = body["messages"][-1]["content"]
    text, finish = answer_for(instruction_of(prompt))
    pieces = _tokens(text)
    budget = body.get("max_tokens", 16)
    if len(pieces) > budget:
        pieces = pieces[:budget]
        text, finish = " ".join(pieces), "length"
    h = _digest(prompt)
    logprobs = [-((h >> (3 * i)) % 900) / 3000.0 for i in range(len(pieces))]
    prompt_ms = 40.0 + (h % 5000) / 100.0
    predicted_ms = 12.5 * max(1, len(pieces)) + (h % 700) / 100.0
    return httpx.Response(
        200,
        json={
            "id": f"cmpl-{h:x}",
            "object": "chat.completion",
            "model": body["model"],
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": finish,
                    "logprobs": {
                        "content": [{"token": t, "logprob": lp} for t, lp in zip(pieces, logprobs)]
                    },
                }
            ],
            "usage": {
                "prompt_tokens": len(_tokens(prompt)),
                "completion_tokens": len(pieces),
                "total_tokens": len(_tokens(prompt)) + len(pieces),
            },
            "timings": {"prompt_ms": prompt_ms, "predicted_ms": predicted_ms},
        },
    )


def transport() -> httpx.MockTransport:
    return httpx.MockTransport(handler)
