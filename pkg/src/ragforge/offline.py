"""Deterministic offline responder so the whole pipeline runs with no network.

Replies are pure functions of (endpoint model, message contents): the
responder recognizes which pipeline prompt it is answering by markers the
prompts themselves carry, then derives content from a hash of the request.
Re-running an identical pipeline therefore reproduces identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import re

from .gateway import ChatTurn, EndpointProfile, StubGateway
from .judge_harness import JUDGE_MARKER, QUESTION_MARKER
from .qa_generator import CONDENSE_MARKER, QA_FORMAT_MARKER

_ASK_RE = re.compile(r"Return exactly (\d+) question-and-answer pairs")

_WORDBOOK = (
    "onset", "duration", "severity", "remission", "impairment", "exclusion",
    "episode", "criterion", "specifier", "prevalence", "course", "features",
)


def _word(digest: str, slot: int) -> str:
    base = _WORDBOOK[int(digest[slot * 2 : slot * 2 + 2], 16) % len(_WORDBOOK)]
    return f"{base}-{digest[slot * 2 : slot * 2 + 4]}"


def offline_chat_responder(profile: EndpointProfile, messages: list[ChatTurn]) -> str:
    joined = "\n".join(m.content for m in messages)
    digest = hashlib.sha256((profile.model + "\x1f" + joined).encode("utf-8")).hexdigest()

    if JUDGE_MARKER in joined:
        score = 1 + int(digest[:8], 16) % 10
        return (
            f"The answer addresses marker {digest[:6]} with adequate coverage of "
            f"the referenced criteria.\nSCORE: {score}"
        )
    if CONDENSE_MARKER in joined:
        return (
            f"Which diagnostic features relating to {_word(digest, 0)} and "
            f"{_word(digest, 1)} does the referenced passage describe?"
        )
    if QUESTION_MARKER in joined:
        return (
            f"According to the passage, what role does {_word(digest, 0)} play in "
            f"the described {_word(digest, 1)} assessment?"
        )
    if QA_FORMAT_MARKER in joined:
        match = _ASK_RE.search(joined)
        ask = int(match.group(1)) if match else 10
        pairs = []
        for j in range(ask):
            sub = hashlib.sha256(f"{digest}:{j}".encode("utf-8")).hexdigest()
            pairs.append(
                {
                    "instruction": (
                        f"What does the {_word(sub, 0)} criterion specify regarding "
                        f"{_word(sub, 1)} in this condition?"
                    ),
                    "output": (
                        f"The {_word(sub, 0)} criterion requires persistent "
                        f"{_word(sub, 2)} accompanied by {_word(sub, 3)}, with the "
                        f"threshold met only when functioning is affected."
                    ),
                }
            )
        return json.dumps(pairs, ensure_ascii=False, indent=1)
    return (
        f"Reply {digest[:10]}: the described criteria combine {_word(digest, 2)} "
        f"with {_word(digest, 3)} thresholds over a defined observation period."
    )


def make_offline_gateway(embed_dim: int = 64) -> StubGateway:
    return StubGateway(fallback=offline_chat_responder, embed_dim=embed_dim)


def offline_profiles() -> dict[str, EndpointProfile]:
    return {
        role: EndpointProfile(base_url="stub://local", model=f"stub-{role}")
        for role in ("generator", "embedder", "judge", "candidate_a", "candidate_b")
    }
