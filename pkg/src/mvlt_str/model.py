"""
Masked vision-language transformer.

A ViT encoder sees only the unmasked patches. A single multi-modal decoder
takes the visual slots (projected encoder outputs plus a learned mask token)
and the text slots (character embeddings plus a MASK row) and predicts
pixels for the visual slots and character classes for the text slots.
The decoder is used through two views that share every parameter and differ
only in how much of the text they mask.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .optim import ParameterStore
from .tensor import (
    Tensor, attention, broadcast_to, concat, detach, embedding, gather, gelu, layer_norm, linear, softmax, split,
)
from .text import Charset, TextMaskPlan, masked_input_ids
from .vision import PatchMaskPlan


logger = logging.getLogger(__name__)


def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float) -> np.ndarray:
    """Normal(0, std²) truncated at two standard deviations."""
    return stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=tuple(shape), random_state=rng)


class Linear:
    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, std: float, bias: bool = True):
        self.weight = store.add(f"{name}.weight", trunc_normal(rng, (in_dim, out_dim), std))
        self.bias = store.add(f"{name}.bias", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, eps: float):
        self.weight = store.add(f"{name}.weight", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Attention:
    """
    Multi-head self-attention over all tokens, no causal mask.

    The fused qkv projection has query and value biases only; a key bias shifts
    a whole score row and softmax is invariant to that.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator, std: float):
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(store, f"{name}.qkv", dim, 3 * dim, rng, std, bias=False)
        self.q_bias = store.add(f"{name}.q_bias", np.zeros(dim))
        self.v_bias = store.add(f"{name}.v_bias", np.zeros(dim))
        self.k_bias = Tensor(np.zeros(dim))
        self.proj = Linear(store, f"{name}.proj", dim, dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        bias = concat([self.q_bias, self.k_bias, self.v_bias])
        return self.proj(attention(linear(x, self.qkv.weight, bias), self.heads, self.scale))


class Mlp:
    def __init__(self, store: ParameterStore, name: str, dim: int, hidden: int,
                 rng: np.random.Generator, std: float):
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, rng, std)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Block:
    """Pre-norm transformer block."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, mlp_ratio: int,
                 eps: float, rng: np.random.Generator, std: float):
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim, eps)
        self.attn = Attention(store, f"{name}.attn", dim, heads, rng, std)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim, eps)
        self.mlp = Mlp(store, f"{name}.mlp", dim, dim * mlp_ratio, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class DecoderOutput:
    """Decoder predictions for a batch, with the plans that produced them."""

    pixels: Optional[Tensor]
    logits: Tensor
    patch_plans: List[PatchMaskPlan]
    text_plans: List[TextMaskPlan]

    @property
    def batch_size(self) -> int:
        return int(self.logits.shape[0])

    def masked_patch_ids(self) -> np.ndarray:
        return np.stack([plan.masked for plan in self.patch_plans])

    def masked_pixels(self) -> Tensor:
        """Pixel predictions at masked patches, (B, N_m, P²·C)."""
        if self.pixels is None:
            raise ShapeError("decoder output carries no pixel predictions")
        return gather(self.pixels, self.masked_patch_ids())

    def masked_text_weights(self) -> np.ndarray:
        """Per-position loss weights: 1/L_m on each sample's masked positions, averaged over samples."""
        weights = np.zeros(self.logits.shape[:2])
        scored = [plan for plan in self.text_plans if plan.masked.size]
        for b, plan in enumerate(self.text_plans):
            if plan.masked.size:
                weights[b, plan.masked] = 1.0 / (plan.masked.size * len(scored))
        return weights

    def rows(self, start: int, stop: int) -> "DecoderOutput":
        return DecoderOutput(
            None if self.pixels is None else self.pixels[start:stop],
            self.logits[start:stop],
            self.patch_plans[start:stop],
            self.text_plans[start:stop],
        )

    def sample(self, b: int) -> dict:
        """One sample's outputs split by the plans into v_m, v_u, t_m and t_u."""
        patch_plan, text_plan = self.patch_plans[b], self.text_plans[b]
        logits = self.logits.data[b]
        parts = {"t_m": logits[text_plan.masked], "t_u": logits[text_plan.unmasked]}
        if self.pixels is not None:
            pixels = self.pixels.data[b]
            parts["v_m"] = pixels[patch_plan.masked]
            parts["v_u"] = pixels[patch_plan.unmasked]
        return parts


class MvltModel:
    """Encoder, shared decoder, embeddings and the three output heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.charset = Charset(config.charset)
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        std = config.init_std
        store = self.store
        num_patches, patch_dim = config.num_patches, config.patch_dim
        enc_dim, dec_dim = config.enc_dim, config.dec_dim
        num_classes = self.charset.num_classes

        self.patch_embed = Linear(store, "encoder.patch_embed", patch_dim, enc_dim, rng, std)
        self.enc_pos_embed = store.add("encoder.pos_embed", rng.normal(0.0, std, (num_patches, enc_dim)))
        self.encoder_blocks = [
            Block(store, f"encoder.blocks.{i}", enc_dim, config.enc_heads, config.mlp_ratio,
                  config.ln_eps, rng, std)
            for i in range(config.enc_depth)
        ]
        self.encoder_norm = LayerNorm(store, "encoder.norm", enc_dim, config.ln_eps)

        self.decoder_embed = Linear(store, "decoder.embed", enc_dim, dec_dim, rng, std)
        self.mask_token = store.add("decoder.mask_token", rng.normal(0.0, std, dec_dim))
        self.visual_pos_embed = store.add("decoder.visual_pos_embed", rng.normal(0.0, std, (num_patches, dec_dim)))
        # the extra last row is the MASK input token
        self.char_embed = store.add("decoder.char_embed", trunc_normal(rng, (num_classes + 1, dec_dim), std))
        self.text_pos_embed = store.add("decoder.text_pos_embed", rng.normal(0.0, std, (config.max_len, dec_dim)))
        self.decoder_blocks = [
            Block(store, f"decoder.blocks.{i}", dec_dim, config.dec_heads, config.mlp_ratio,
                  config.ln_eps, rng, std)
            for i in range(config.dec_depth)
        ]
        self.decoder_norm = LayerNorm(store, "decoder.norm", dec_dim, config.ln_eps)
        self.pixel_head = Linear(store, "decoder.pixel_head", dec_dim, patch_dim, rng, std)
        self.char_head = Linear(store, "decoder.char_head", dec_dim, num_classes, rng, std)
        self.correction_proj = Linear(store, "decoder.correction_proj", num_classes, dec_dim, rng, std)

        self.decoder_1 = DecoderView(self, "decoder_1", config.text_mask_ratio_explicit)
        self.decoder_2 = DecoderView(self, "decoder_2", config.text_mask_ratio_implicit)
        logger.debug(f"Built model with {self.num_parameters()} parameters in {len(self.store)} tensors")

    def num_parameters(self) -> int:
        return self.store.num_parameters()

    def decoder_parameters(self) -> List[Tensor]:
        return [p for name, p in self.store.items() if name.startswith("decoder.")]

    def _check_patches(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim == 2:
            patches = patches[None]
        expected = (self.config.num_patches, self.config.patch_dim)
        if patches.ndim != 3 or patches.shape[1:] != expected:
            raise ShapeError(f"patch batch {patches.shape} does not match (B, {expected[0]}, {expected[1]})")
        return patches

    def encode_masked(self, patches: np.ndarray, plans: Sequence[PatchMaskPlan]) -> Tensor:
        """Encode the unmasked patches of each sample, (B, N_u, D1)."""
        patches = self._check_patches(patches)
        if len(plans) != patches.shape[0]:
            raise ShapeError(f"{len(plans)} mask plans for a batch of {patches.shape[0]}")
        if any(plan.num_patches != self.config.num_patches for plan in plans):
            raise ShapeError(f"mask plan does not cover {self.config.num_patches} patches")
        if len({plan.unmasked.size for plan in plans}) > 1:
            raise ShapeError("all samples in a batch must keep the same number of patches")
        keep = np.stack([plan.unmasked for plan in plans])
        visible = patches[np.arange(patches.shape[0])[:, None], keep]

        x = self.patch_embed(Tensor(visible)) + embedding(self.enc_pos_embed, keep)
        for block in self.encoder_blocks:
            x = block(x)
        return self.encoder_norm(x)

    def encode_full(self, patches: np.ndarray) -> Tensor:
        patches = self._check_patches(patches)
        plans = [PatchMaskPlan.empty(self.config.num_patches)] * patches.shape[0]
        return self.encode_masked(patches, plans)

    def decode(self, encoded: Tensor, patch_plans: Sequence[PatchMaskPlan],
               text_tokens: Union[np.ndarray, Tensor], text_plans: Sequence[TextMaskPlan],
               with_pixels: bool = True) -> DecoderOutput:
        """
        Run the decoder over N visual and L text slots.

        ``text_tokens`` is either a (B, L) array of input ids (MASK at masked
        positions) or a (B, L, D2) tensor of ready text embeddings.
        """
        batch, kept = encoded.shape[0], encoded.shape[1]
        num_patches, max_len, dec_dim = self.config.num_patches, self.config.max_len, self.config.dec_dim
        if len(patch_plans) != batch or len(text_plans) != batch:
            raise ShapeError(f"plans for {len(patch_plans)}/{len(text_plans)} samples, batch has {batch}")
        if any(plan.unmasked.size != kept for plan in patch_plans):
            raise ShapeError(f"encoded batch keeps {kept} patches, plans disagree")
        if any(plan.length != max_len for plan in text_plans):
            raise ShapeError(f"text plans must cover {max_len} positions")

        visual = self.decoder_embed(encoded)
        if kept < num_patches:
            tokens = broadcast_to(self.mask_token, (batch, num_patches - kept, dec_dim))
            visual = concat([visual, tokens], axis=1)
        order = np.stack([np.concatenate([plan.unmasked, plan.masked]) for plan in patch_plans])
        restore = np.argsort(order, axis=1, kind="stable")
        if not np.array_equal(restore, np.broadcast_to(np.arange(num_patches), restore.shape)):
            visual = gather(visual, restore)
        visual = visual + self.visual_pos_embed

        if isinstance(text_tokens, Tensor):
            if text_tokens.shape != (batch, max_len, dec_dim):
                raise ShapeError(f"text embeddings {text_tokens.shape} != {(batch, max_len, dec_dim)}")
            text = text_tokens
        else:
            ids = np.asarray(text_tokens)
            if ids.shape != (batch, max_len):
                raise ShapeError(f"text ids {ids.shape} != {(batch, max_len)}")
            text = embedding(self.char_embed, ids)
        text = text + self.text_pos_embed

        x = concat([visual, text], axis=1)
        for block in self.decoder_blocks:
            x = block(x)
        x = self.decoder_norm(x)
        visual_out, text_out = split(x, [num_patches, max_len], axis=1)
        pixels = self.pixel_head(visual_out) if with_pixels else None
        return DecoderOutput(pixels, self.char_head(text_out), list(patch_plans), list(text_plans))

    def iterative_correct(self, encoded: Tensor, iterations: int) -> List[Tensor]:
        """
        Logits for iterations 0..K from a fully visible encoding.

        Iteration 0 reads all-MASK text. Iteration k feeds the projected
        softmax of iteration k-1, with the gradient stopped there.
        """
        if iterations < 0:
            raise ConfigError(f"iteration count must be non-negative, got {iterations}")
        batch = encoded.shape[0]
        num_patches, max_len = self.config.num_patches, self.config.max_len
        if encoded.shape[1] != num_patches:
            raise ShapeError(f"iterative correction needs all {num_patches} patches encoded, got {encoded.shape[1]}")
        patch_plans = [PatchMaskPlan.empty(num_patches)] * batch

        ids = masked_input_ids(batch, max_len, self.charset)
        first = self.decode(encoded, patch_plans, ids, [TextMaskPlan.all_masked(max_len)] * batch,
                            with_pixels=False)
        logits = [first.logits]
        open_plans = [TextMaskPlan.none_masked(max_len)] * batch
        for _ in range(iterations):
            probs = softmax(detach(logits[-1]), axis=-1)
            out = self.decode(encoded, patch_plans, self.correction_proj(probs), open_plans, with_pixels=False)
            logits.append(out.logits)
        return logits


class DecoderView:
    """A named text-masking policy over the model's one decoder."""

    def __init__(self, model: MvltModel, name: str, text_mask_ratio: float):
        self.model = model
        self.name = name
        self.text_mask_ratio = text_mask_ratio

    def parameters(self) -> List[Tensor]:
        return self.model.decoder_parameters()

    def decode(self, encoded: Tensor, patch_plans: Sequence[PatchMaskPlan],
               text_tokens: Union[np.ndarray, Tensor], text_plans: Sequence[TextMaskPlan],
               with_pixels: bool = True) -> DecoderOutput:
        return self.model.decode(encoded, patch_plans, text_tokens, text_plans, with_pixels)
