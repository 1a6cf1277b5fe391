"""Word-level vocabulary and model token streams.

Waypoints travel through the decoder as single `<point>` tokens whose values
live in embeddings, never as digit strings; text (prompts, reasoning) uses a
small word-level vocabulary with lowercase alphabetic runs kept whole and
digits split one per token. Special markers and the digit/punctuation base
tokens sit at fixed ids so embeddings can be structured around them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from collections import Counter

import numpy as np

from .geometry import Sample
from .simulator import GRID_SIZE

SPECIALS = ("<pad>", "<unk>", "<s>", "</s>", "<image>", "<point>", "<point_start>", "<point_end>")
PAD, UNK, BOS, EOS, IMG, PT, PTS, PTE = range(8)

# always present right after the specials, so digits get stable ids 8..17
BASE_TOKENS = tuple("0123456789") + (".", "-", ",", ";")

VOCAB_CAP = 2048
CONTEXT_LIMIT = 512
PATCH_SIZE = 8
PATCHES_PER_FRAME = (GRID_SIZE // PATCH_SIZE) ** 2  # 16
N_FRAMES = 9
N_VISUAL = N_FRAMES * PATCHES_PER_FRAME             # 144

_TOKEN_RE = re.compile(r"[a-z]+|[0-9]|\S")


def tokenize(text: str) -> list:
    """Lowercase word-level split: alpha runs whole, digits and punctuation single."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    _index: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, text: str) -> list:
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = tuple(line.rstrip("\n") for line in fh)
        if tokens and tokens[-1] == "":
            tokens = tokens[:-1]
        return cls(tokens)


def build_vocab(texts, cap: int = VOCAB_CAP) -> Vocabulary:
    """Specials, base tokens, then corpus words by frequency (ties alphabetical)."""
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    reserved = set(SPECIALS) | set(BASE_TOKENS)
    words = sorted(
        (t for t in counts if t not in reserved),
        key=lambda t: (-counts[t], t),
    )
    tokens = SPECIALS + BASE_TOKENS + tuple(words)
    return Vocabulary(tokens[:cap])


def render_prompt(goal, horizon: int, mode: str = "forecast") -> str:
    """Instruction text naming the ego-frame goal and the requested step count."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    head = f"goal {goal.x:.2f} {goal.y:.2f} ."
    if mode == "forecast":
        return f"{head} predict {horizon} waypoints"
    if mode == "cot":
        return f"{head} explain the plan"
    raise ValueError(f"unknown mode: {mode}")


def build_vocab_from_samples(samples, cap: int = VOCAB_CAP) -> Vocabulary:
    texts = []
    for s in samples:
        texts.append(render_prompt(s.goal, max(len(s.future), 1), "forecast"))
        texts.append(render_prompt(s.goal, max(len(s.future), 1), "cot"))
        if s.cot_text is not None:
            texts.append(s.cot_text)
    return build_vocab(texts, cap=cap)


@dataclass(frozen=True)
class TokenStream:
    """One sample lowered to model inputs.

    `ids` holds the whole sequence (prefix plus targets); `loss_mask` marks
    target positions, i.e. ids predicted from the hidden state one step
    earlier. `point_positions` lists every `<point>` token in slot order --
    9 history, 1 goal, then any supervised future points -- with coordinates
    in `point_values` and `point_supervised` flagging the future ones.
    """

    ids: np.ndarray
    loss_mask: np.ndarray
    visual_positions: np.ndarray
    point_positions: np.ndarray
    point_values: np.ndarray
    point_supervised: np.ndarray
    grids: np.ndarray
    mode: str
    requested_horizon: int

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def prefix_length(self) -> int:
        return int(len(self.ids) - self.loss_mask.sum())


def assemble(
    sample: Sample,
    vocab: Vocabulary,
    mode: str = "forecast",
    requested_horizon=None,
    include_targets: bool = True,
) -> TokenStream:
    """Lay out BOS, visual slots, prompt, history/goal points, then targets.

    Forecast targets are `<point_start>`, one `<point>` per future waypoint,
    `<point_end>`, `</s>`; cot targets are the reasoning tokens plus `</s>`.
    `requested_horizon` only changes the prompt text, letting a stream ask for
    a horizon different from the supervised future (truncation evaluation).
    """
    T = len(sample.future)
    if requested_horizon is None:
        requested_horizon = T
    prompt_ids = vocab.encode(render_prompt(sample.goal, requested_horizon, mode))

    ids = [BOS] + [IMG] * N_VISUAL + prompt_ids + [PTS] + [PT] * 9 + [PTE] + [PT]
    visual_positions = np.arange(1, 1 + N_VISUAL, dtype=np.int64)
    first_hist = 1 + N_VISUAL + len(prompt_ids) + 1
    point_positions = list(range(first_hist, first_hist + 9)) + [first_hist + 10]
    point_values = [[p.x, p.y] for p in sample.history.points] + [[sample.goal.x, sample.goal.y]]
    point_supervised = [False] * 10
    prefix_len = len(ids)

    if include_targets:
        if mode == "forecast":
            targets = [PTS] + [PT] * T + [PTE] + [EOS]
            for k, p in enumerate(sample.future.points):
                point_positions.append(prefix_len + 1 + k)
                point_values.append([p.x, p.y])
                point_supervised.append(True)
        else:
            if sample.cot_text is None:
                raise ValueError("cot mode needs an annotated sample")
            targets = vocab.encode(sample.cot_text) + [EOS]
        ids = ids + targets
        loss_mask = np.zeros(len(ids), dtype=bool)
        loss_mask[prefix_len:] = True
    else:
        loss_mask = np.zeros(len(ids), dtype=bool)

    if len(ids) > CONTEXT_LIMIT:
        raise ValueError(f"stream of {len(ids)} tokens exceeds the {CONTEXT_LIMIT} context")

    grids = np.stack([g.cells for g in sample.observations]).astype(np.uint8)
    return TokenStream(
        ids=np.asarray(ids, dtype=np.int64),
        loss_mask=loss_mask,
        visual_positions=visual_positions,
        point_positions=np.asarray(point_positions, dtype=np.int64),
        point_values=np.asarray(point_values, dtype=np.float64),
        point_supervised=np.asarray(point_supervised, dtype=bool),
        grids=grids,
        mode=mode,
        requested_horizon=int(requested_horizon),
    )
