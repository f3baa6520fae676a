"""Frozen text-encoder stand-in with adapter attachment sites.

The stack maps a sequence of prompt token embeddings to a unit-norm
text embedding. Backbone weights are drawn once from a seeded RNG and
never trained; the only learnable influence on the output is through
the scale/shift adapters threaded into each block. Class prompts come
as precomputed token embeddings (region-level tokens followed by
slide-level tokens) — there is no tokenizer here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape as tp
from .errors import DataError
from .ssf import SITE_KINDS, SsfParams, SsfSite, merge_into_layernorm, merge_into_linear, ssf_forward


@dataclass
class EncoderBlock:
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w1: np.ndarray  # (hidden, dim)
    b1: np.ndarray
    w2: np.ndarray  # (dim, hidden)
    b2: np.ndarray


@dataclass
class TextEncoderStack:
    """Seeded immutable block stack: per block layernorm -> adapter site ->
    tanh MLP -> adapter site -> residual add; then token mean-pool,
    projection, l2-normalization."""

    blocks: list[EncoderBlock]
    proj: np.ndarray  # (dim, dim)
    dim: int
    seed: int | None = None

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def weight_arrays(self) -> list[np.ndarray]:
        out = []
        for b in self.blocks:
            out.extend([b.ln_gain, b.ln_bias, b.w1, b.b1, b.w2, b.b2])
        out.append(self.proj)
        return out

    def checksum(self) -> float:
        return float(sum(np.abs(a).sum() for a in self.weight_arrays()))


def build_stack(seed: int, n_blocks: int, dim: int, mlp_hidden: int | None = None) -> TextEncoderStack:
    """Deterministic frozen backbone. Weight matrices are N(0, 1/sqrt(dim));
    layernorm gains sit near one so the untuned stack is well-conditioned."""
    hidden = mlp_hidden or dim
    std = 1.0 / np.sqrt(dim)
    seeds = np.random.SeedSequence(seed).spawn(n_blocks + 1)
    blocks = []
    for i in range(n_blocks):
        rng = np.random.default_rng(seeds[i])
        blocks.append(EncoderBlock(
            ln_gain=1.0 + std * rng.standard_normal(dim),
            ln_bias=std * rng.standard_normal(dim),
            w1=std * rng.standard_normal((hidden, dim)),
            b1=std * rng.standard_normal(hidden),
            w2=std * rng.standard_normal((dim, hidden)),
            b2=std * rng.standard_normal(dim),
        ))
    proj = std * np.random.default_rng(seeds[n_blocks]).standard_normal((dim, dim))
    return TextEncoderStack(blocks=blocks, proj=proj, dim=dim, seed=seed)


# ---------------------------------------------------------------------------
# prompts


@dataclass
class ClassPrompt:
    class_id: int
    name: str
    region_tokens: np.ndarray  # (n_region_tokens, dim)
    slide_tokens: np.ndarray   # (n_slide_tokens, dim)


@dataclass
class PromptSet:
    classes: list[ClassPrompt]
    tumor_class: int | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def build_prompt(prompt: ClassPrompt) -> np.ndarray:
    """Concatenate the two token sequences, region-level tokens first."""
    for name, toks in (("region_tokens", prompt.region_tokens), ("slide_tokens", prompt.slide_tokens)):
        if toks.ndim != 2 or toks.shape[0] == 0:
            raise DataError(f"{name} of class {prompt.class_id} must be a nonempty token matrix")
    if prompt.region_tokens.shape[1] != prompt.slide_tokens.shape[1]:
        raise DataError("region and slide tokens must share the embedding dimension")
    return np.concatenate([prompt.region_tokens, prompt.slide_tokens], axis=0)


def load_prompts(path: str | Path) -> PromptSet:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read prompt file {path}: {exc}") from exc
    try:
        classes = [ClassPrompt(
            class_id=int(c["id"]),
            name=str(c["name"]),
            region_tokens=np.asarray(c["region_tokens"], dtype=np.float64),
            slide_tokens=np.asarray(c["slide_tokens"], dtype=np.float64),
        ) for c in raw["classes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed prompt file {path}: {exc}") from exc
    tumor = raw.get("tumor_class")
    return PromptSet(classes=classes, tumor_class=None if tumor is None else int(tumor))


def save_prompts(prompts: PromptSet, path: str | Path) -> None:
    payload = {
        "tumor_class": prompts.tumor_class,
        "classes": [{
            "id": c.class_id,
            "name": c.name,
            "region_tokens": c.region_tokens.tolist(),
            "slide_tokens": c.slide_tokens.tolist(),
        } for c in prompts.classes],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# forward


def _site_map(sites: list[SsfSite] | None) -> dict:
    if sites is None:
        return {}
    return {(s.block, s.kind): s.params for s in sites}


def encode(stack: TextEncoderStack, tokens: np.ndarray, sites: list[SsfSite] | None = None):
    """Map token embeddings (n_tokens, dim) to a unit-norm text embedding.

    Adapter parameters may be tape nodes, in which case the result is a
    node differentiable with respect to them; the backbone itself never
    enters the tape. `sites=None` runs the bare frozen stack.
    """
    tokens = np.asarray(tokens, dtype=np.float64) if not isinstance(tokens, np.ndarray) else tokens
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise DataError("tokens must be a nonempty (n_tokens, dim) matrix")
    if tokens.shape[1] != stack.dim:
        raise DataError(f"token dim {tokens.shape[1]} does not match encoder dim {stack.dim}")
    site_params = _site_map(sites)
    xs = [tokens[t] for t in range(tokens.shape[0])]
    for b_idx, block in enumerate(stack.blocks, start=1):
        ln_site = site_params.get((b_idx, "post_layernorm"))
        mlp_site = site_params.get((b_idx, "post_mlp"))
        nxt = []
        for x in xs:
            u = tp.layernorm(x, block.ln_gain, block.ln_bias)
            if ln_site is not None:
                u = ssf_forward(u, ln_site)
            h = tp.tanh(tp.add(tp.matvec(block.w1, u), block.b1))
            v = tp.add(tp.matvec(block.w2, h), block.b2)
            if mlp_site is not None:
                v = ssf_forward(v, mlp_site)
            nxt.append(tp.add(x, v))
        xs = nxt
    pooled = tp.mean(xs)
    return tp.l2_normalize(tp.matvec(stack.proj, pooled))


def refinement_embedding(class_embeddings: list, tumor_index: int | None = None):
    """Guidance embedding used to refine attention weights.

    With a designated tumor class (binary tasks) the guidance is that
    class's embedding. Otherwise it is the normalized mean of all class
    embeddings; a near-zero mean yields None, which disables refinement.
    """
    if len(class_embeddings) == 0:
        raise DataError("refinement embedding needs at least one class embedding")
    if tumor_index is not None:
        if not 0 <= tumor_index < len(class_embeddings):
            raise DataError(f"tumor class index {tumor_index} out of range")
        return class_embeddings[tumor_index]
    if len(class_embeddings) == 1:
        return class_embeddings[0]
    m = tp.mean(class_embeddings)
    if float(np.linalg.norm(tp.value(m))) < tp.EPS_NORM:
        return None
    return tp.l2_normalize(m)


# ---------------------------------------------------------------------------
# re-parameterization merge


def merge_reparam(stack: TextEncoderStack, sites: list[SsfSite]) -> TextEncoderStack:
    """Fold every adapter into the affine layer it follows.

    Post-layernorm adapters land in the layernorm gain/bias; post-MLP
    adapters land in the MLP output linear. The merged stack carries no
    adapters and computes the same function as the adapted one.
    """
    per_block: dict[int, dict[str, SsfParams]] = {}
    for s in sites:
        per_block.setdefault(s.block, {})[s.kind] = s.params
    merged = []
    for b_idx, block in enumerate(stack.blocks, start=1):
        kinds = per_block.get(b_idx, {})
        unknown = set(kinds) - set(SITE_KINDS)
        if unknown:
            raise DataError(f"no affine merge target for site kind(s) {sorted(unknown)}")
        ln_gain, ln_bias = block.ln_gain, block.ln_bias
        w2, b2 = block.w2, block.b2
        if "post_layernorm" in kinds:
            ln_gain, ln_bias = merge_into_layernorm(ln_gain, ln_bias, kinds["post_layernorm"])
        if "post_mlp" in kinds:
            w2, b2 = merge_into_linear(w2, b2, kinds["post_mlp"])
        merged.append(EncoderBlock(
            ln_gain=np.array(ln_gain, copy=True), ln_bias=np.array(ln_bias, copy=True),
            w1=np.array(block.w1, copy=True), b1=np.array(block.b1, copy=True),
            w2=np.array(w2, copy=True), b2=np.array(b2, copy=True),
        ))
    return TextEncoderStack(blocks=merged, proj=np.array(stack.proj, copy=True), dim=stack.dim, seed=None)
