"""Structured prompt parsing/rendering and the toy hash-bucket text encoder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch

from .errors import PromptParseError

VISUAL_TAG = "[VISUAL]:"
SPEECH_TAG = "[SPEECH]:"


@dataclass(frozen=True)
class StructuredPrompt:
    visual: str
    speech: str


@dataclass
class TextEmbedding:
    """Fixed-length token embeddings plus an attendability mask.

    tokens: [max_text_len, d_text]; mask: [max_text_len] bool (True = real
    token); pooled: mean of the real rows, or the pad row if there are none.
    """

    tokens: torch.Tensor
    mask: torch.Tensor
    pooled: torch.Tensor


def parse_prompt(s: str) -> StructuredPrompt:
    """Split '[VISUAL]: c_v [SPEECH]: c_s' into its two fields."""
    iv = s.find(VISUAL_TAG)
    isp = s.find(SPEECH_TAG)
    if isp >= 0 and (iv < 0 or isp < iv):
        raise PromptParseError("speech tag before visual tag", offset=isp)
    if iv < 0:
        raise PromptParseError("missing [VISUAL]: tag", offset=0)
    if isp < 0:
        raise PromptParseError("missing [SPEECH]: tag", offset=len(s))
    visual = s[iv + len(VISUAL_TAG) : isp].strip()
    speech = s[isp + len(SPEECH_TAG) :].strip()
    return StructuredPrompt(visual=visual, speech=speech)


def render_prompt(p: StructuredPrompt) -> str:
    return f"{VISUAL_TAG} {p.visual} {SPEECH_TAG} {p.speech}"


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def token_id(token: str, vocab_size: int) -> int:
    """Stable 64-bit string hash bucketed into the vocabulary."""
    h = hashlib.blake2b(token.encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % vocab_size


def encode_text(
    p: StructuredPrompt,
    table: torch.Tensor,
    seg_table: torch.Tensor,
    max_text_len: int,
) -> TextEmbedding:
    """Embed a structured prompt as a constant-shape token sequence.

    `table` is [vocab_size + 1, d_text]; the last row is the dedicated pad
    embedding, masked out of cross-attention. A segment embedding from
    `seg_table` ([2, d_text], row 0 = visual span, row 1 = speech span) is
    added so identical words in the two spans embed differently.
    """
    vocab_size = table.shape[0] - 1
    ids: list[int] = []
    segs: list[int] = []
    for tok in tokenize(p.visual):
        ids.append(token_id(tok, vocab_size))
        segs.append(0)
    for tok in tokenize(p.speech):
        ids.append(token_id(tok, vocab_size))
        segs.append(1)
    ids = ids[:max_text_len]
    segs = segs[:max_text_len]
    n = len(ids)

    pad_id = vocab_size
    full_ids = ids + [pad_id] * (max_text_len - n)
    tokens = table[torch.tensor(full_ids, dtype=torch.long)].clone()
    if n:
        tokens[:n] += seg_table[torch.tensor(segs, dtype=torch.long)]
    mask = torch.zeros(max_text_len, dtype=torch.bool)
    mask[:n] = True
    pooled = tokens[:n].mean(dim=0) if n else table[pad_id].clone()
    return TextEmbedding(tokens=tokens, mask=mask, pooled=pooled)
