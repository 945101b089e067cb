"""Soft-prompt calibration of a frozen summarizer.

A trainable copy of the frozen encoder maps a fixed soft prompt token string
to a d-vector. Training pulls the element-wise mean of (frozen embedding of
the prompted input, soft vector) toward the frozen embedding of the bare
input, touching no frozen weight. At inference the soft vector is projected
back to nearby vocabulary tokens and that invariant prefix is prepended to
every prompted input before encoding and greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .errors import ContractError, TrainingError
from .model import ConvergenceRule, EncoderDecoderLM, params_digest, sequence_forward
from .optim import Adam
from .vocab import UNK_ID, TokenSequence, Vocabulary, concat, sep_sequence, tokenize

DEFAULT_SOFT_TOKEN_TEXT = "radiologist describe stable normality and abnormality exam"
OOD_SOFT_TOKEN_TEXT = "##1 ##2"

# Decoded-prefix length cap; see decode_soft_prompt.
DEFAULT_SOFT_PREFIX_LEN = 2

DISTANCES: dict[str, Callable[[DiffValue, DiffValue], DiffValue]] = {
    "mse": ad.mse_distance,
    "cross_entropy": ad.cross_entropy_distance,
}

SEPARATOR_POLICIES = ("prompt_first", "notes_first")


@dataclass(frozen=True)
class SoftPromptToken:
    """The fixed word string fed to the soft encoder each step."""

    text: str
    ids: TokenSequence
    in_distribution: bool
    length: int

    @classmethod
    def from_text(cls, text: str, vocab: Vocabulary) -> "SoftPromptToken":
        seq = tokenize(text, vocab)
        if not seq.ids:
            raise ContractError("soft prompt token must contain at least one token")
        return cls(
            text=text,
            ids=seq,
            in_distribution=UNK_ID not in seq.ids,
            length=len(seq.ids),
        )

    def truncated(self, length: int, vocab: Vocabulary) -> "SoftPromptToken":
        if not 1 <= length <= self.length:
            raise ContractError(
                f"soft token length {length} out of range 1..{self.length}"
            )
        words = self.text.split()
        return SoftPromptToken.from_text(" ".join(words[:length]), vocab)


@dataclass(frozen=True)
class CalibrationConfig:
    distance: str = "mse"
    learning_rate: float = 1e-3
    max_epochs: int = 200
    convergence_tol: float = 1e-4
    stall_window: int = 10
    seed: int = 7
    separator_policy: str = "prompt_first"
    # Pairs folded into one optimizer step. None accumulates the loss over
    # every (input, prompt) pair and takes a single step per epoch, matching
    # the one-update-per-iteration training loop; an integer gives
    # shuffled mini-batch steps instead.
    batch_size: int | None = None

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ContractError(f"unknown distance {self.distance!r}")
        if self.separator_policy not in SEPARATOR_POLICIES:
            raise ContractError(f"unknown separator policy {self.separator_policy!r}")
        if self.learning_rate <= 0 or self.max_epochs <= 0 or self.convergence_tol <= 0:
            raise ContractError("learning_rate, max_epochs, convergence_tol must be positive")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ContractError("batch_size must be positive when given")


class SoftPromptEncoder:
    """Trainable encoder initialized as a bit-exact copy of the frozen one."""

    def __init__(self, params: dict[str, DiffValue], cfg, embed_dim: int):
        self.params = params
        self.cfg = cfg
        self.input_dim = embed_dim
        self.output_dim = embed_dim
        self.trained = False

    @classmethod
    def from_frozen(cls, lm: EncoderDecoderLM) -> "SoftPromptEncoder":
        if not lm.frozen:
            raise ContractError("soft prompt encoder must copy a frozen model")
        params: dict[str, DiffValue] = {}
        for name, p in lm.params.items():
            if not name.startswith("enc."):
                continue
            clone = ad.value(p.data.copy()) if name == "enc.pos" else ad.param(p.data.copy())
            params[name] = clone
        return cls(params, lm.cfg, lm.cfg.embed_dim)

    def trainable(self) -> list[DiffValue]:
        return [p for p in self.params.values() if p.requires_grad]

    def digest(self) -> str:
        return params_digest(self.params)

    def encode_pooled(self, ids: Sequence[int]) -> DiffValue:
        per_token = sequence_forward(self.params, "enc", ids, self.cfg)
        return ad.mean_rows(per_token)


def encode_soft(tok: SoftPromptToken, enc: SoftPromptEncoder) -> DiffValue:
    """The soft prompt vector: pooled soft-encoder output for the token string."""
    if tok.length < 1:
        raise ContractError("soft prompt token is empty")
    return enc.encode_pooled(tok.ids.ids)


def join_prompted(t_llm: TokenSequence, t_org: TokenSequence, policy: str = "prompt_first") -> TokenSequence:
    """Join prompt and notes around a separator; an empty prompt yields the notes alone."""
    if not t_org.ids:
        raise ContractError("input notes must be non-empty")
    if not t_llm.ids:
        return t_org
    if policy == "prompt_first":
        return concat(t_llm, sep_sequence(), t_org)
    if policy == "notes_first":
        return concat(t_org, sep_sequence(), t_llm)
    raise ContractError(f"unknown separator policy {policy!r}")


def embedding_mean(a: DiffValue, b: DiffValue) -> DiffValue:
    """Element-wise average of two equal-dimension embeddings."""
    return ad.scale(ad.add(a, b), 0.5)


def prompted_embedding(
    t_org: TokenSequence,
    t_llm: TokenSequence,
    tok: SoftPromptToken,
    lm: EncoderDecoderLM,
    enc: SoftPromptEncoder,
    policy: str = "prompt_first",
) -> DiffValue:
    """Mean of the frozen pooled embedding of the prompted input and the soft vector.

    Gradient reaches only the soft encoder; the frozen path contributes constants.
    """
    joined = join_prompted(t_llm, t_org, policy)
    frozen_pooled = lm.encode(joined).pooled
    soft_vec = encode_soft(tok, enc)
    return embedding_mean(frozen_pooled, soft_vec)


def alignment_loss(
    t_org: TokenSequence,
    t_llm: TokenSequence,
    tok: SoftPromptToken,
    lm: EncoderDecoderLM,
    enc: SoftPromptEncoder,
    distance: str = "mse",
    policy: str = "prompt_first",
) -> DiffValue:
    """Distance between the bare-notes embedding and the prompted embedding."""
    distance_fn = DISTANCES[distance]
    bare = lm.encode(t_org).pooled
    prompted = prompted_embedding(t_org, t_llm, tok, lm, enc, policy)
    return distance_fn(bare, prompted)


def train_calibrator(
    corpus_inputs: Sequence[TokenSequence],
    prompts: Sequence[TokenSequence],
    tok: SoftPromptToken,
    lm: EncoderDecoderLM,
    config: CalibrationConfig = CalibrationConfig(),
    log_fn: Callable[[int, float], None] | None = None,
) -> SoftPromptEncoder:
    """Fit the soft encoder over every (input, prompt) pair; frozen weights untouched.

    Zero-shot by construction: only input token sequences are accepted, never
    gold summaries. The frozen pooled embeddings are constants of the
    optimization, so they are computed once up front.
    """
    if not corpus_inputs:
        raise ContractError("train_calibrator requires at least one input")
    if not prompts:
        raise ContractError("train_calibrator requires at least one prompt")
    if not lm.frozen:
        raise ContractError("train_calibrator requires a frozen model")
    enc = SoftPromptEncoder.from_frozen(lm)
    batch_distance = ad.rowwise_mse if config.distance == "mse" else ad.rowwise_cross_entropy

    bare_pooled = np.stack([lm.encode(t).pooled.data for t in corpus_inputs])
    prompted_pooled = np.stack([
        [lm.encode(join_prompted(p, t, config.separator_policy)).pooled.data for p in prompts]
        for t in corpus_inputs
    ])
    n_inputs, n_prompts = len(corpus_inputs), len(prompts)
    pairs = [(i, j) for i in range(n_inputs) for j in range(n_prompts)]
    n_pairs = len(pairs)

    opt = Adam(enc.trainable(), learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    rule = ConvergenceRule(config.convergence_tol, config.stall_window)
    step_size = config.batch_size or n_pairs
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_pairs)
        total = 0.0
        for start in range(0, n_pairs, step_size):
            batch = [pairs[k] for k in order[start : start + step_size]]
            targets = np.stack([bare_pooled[i] for i, _ in batch])
            frozen_side = np.stack([prompted_pooled[i][j] for i, j in batch])
            soft_vec = encode_soft(tok, enc)
            fused = ad.scale(ad.add_row_vector(ad.value(frozen_side), soft_vec), 0.5)
            loss = batch_distance(ad.value(targets), fused)
            if not np.isfinite(loss.data):
                raise TrainingError(
                    f"non-finite calibration loss at epoch {epoch}, pair {start}"
                )
            total += float(loss.data) * len(batch)
            ad.backward(loss)
            opt.step()
        mean_loss = total / n_pairs
        if log_fn is not None:
            log_fn(epoch, mean_loss)
        if rule.update(mean_loss):
            break
    enc.trained = True
    return enc


def decode_soft_prompt(
    enc: SoftPromptEncoder,
    tok: SoftPromptToken,
    lm: EncoderDecoderLM,
    k: int | None = None,
) -> TokenSequence:
    """Project the soft vector onto k vocabulary tokens by residual nearest-row search.

    Slot i targets the soft vector minus the mean embedding of the rows already
    chosen, so successive tokens cover complementary directions. The default
    length is capped at two tokens: longer decoded prefixes leak spurious
    content words into the order-free pooled context and measurably depress
    summary quality, while a short prefix keeps the variance damping.
    """
    if not lm.frozen:
        raise ContractError("decode_soft_prompt requires a frozen model")
    if k is None:
        k = min(DEFAULT_SOFT_PREFIX_LEN, tok.length)
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    soft = encode_soft(tok, enc).data
    table = lm.params["enc.embed"].data
    chosen: list[int] = []
    for _ in range(k):
        target = soft if not chosen else soft - table[chosen].mean(axis=0)
        chosen.append(lm.nearest_token(target))
    surface = " ".join(lm.vocab.token_of(i) for i in chosen)
    return TokenSequence(tuple(chosen), surface=surface)


def summarize(
    t_org: TokenSequence,
    t_llm: TokenSequence,
    lm: EncoderDecoderLM,
    calibration: tuple[SoftPromptEncoder, SoftPromptToken] | None = None,
    max_len: int | None = None,
    policy: str = "prompt_first",
) -> TokenSequence:
    """Greedy summary of prompted notes, optionally with the invariant soft prefix."""
    if not t_org.ids:
        raise ContractError("input notes must be non-empty")
    if not lm.frozen:
        raise ContractError("summarize requires a frozen model")
    prefix: TokenSequence | None = None
    if calibration is not None:
        enc, tok = calibration
        prefix = decode_soft_prompt(enc, tok, lm)
    return _summarize_with_prefix(t_org, t_llm, lm, prefix, max_len, policy)


def _summarize_with_prefix(
    t_org: TokenSequence,
    t_llm: TokenSequence,
    lm: EncoderDecoderLM,
    prefix: TokenSequence | None,
    max_len: int | None,
    policy: str,
) -> TokenSequence:
    joined = join_prompted(t_llm, t_org, policy)
    if prefix is not None and prefix.ids:
        joined = concat(prefix, joined)
    pooled = lm.encode(joined).pooled
    return lm.decode_greedy(pooled, max_len=max_len)
