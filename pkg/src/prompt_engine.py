# src/prompt_engine.py

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Tuple

import numpy as np

from src import tensor_autodiff as ad
from src.errors import ContractError, InputError, ShapeError
from src.models import (
    CommonProjector,
    DynamicOp,
    EncoderConfig,
    GeneratorKind,
    MissingType,
    ModalityKind,
    ModalMode,
    PromptConfig,
)
from src.tensor_autodiff import Tensor
from src.weight_archive import load_archive, save_archive

if TYPE_CHECKING:
    from src.missing_sim import Sample

__all__ = [
    "AssembledPrompts",
    "BottleneckParams",
    "MissingType",
    "PromptBank",
    "assemble",
    "bottleneck_mlp",
    "common_prompts",
    "correlated_chain",
    "dynamic_prompt",
    "route",
]

logger = logging.getLogger(__name__)

STREAMS = (ModalityKind.TEXT, ModalityKind.IMAGE)


@dataclass(frozen=True)
class BottleneckParams:
    fc1: Tensor
    fc1_b: Tensor
    fc2: Tensor
    fc2_b: Tensor
    ln_g: Tensor
    ln_b: Tensor

    @property
    def in_width(self) -> int:
        return self.fc1.shape[0]

    @property
    def hidden(self) -> int:
        return self.fc1.shape[1]


def bottleneck_hidden(width: int, reduction: int) -> int:
    return math.ceil(width / reduction)


def bottleneck_mlp(params: BottleneckParams, x: Tensor) -> Tensor:
    """LN(fc2(GELU(fc1(x)))) over the last axis."""
    if x.shape[-1] != params.in_width:
        raise ShapeError(f"bottleneck input width {x.shape[-1]} does not match weights {params.fc1.shape}")
    h = ad.gelu(ad.matmul(x, params.fc1) + params.fc1_b)
    out = ad.matmul(h, params.fc2) + params.fc2_b
    return ad.layernorm(out, params.ln_g, params.ln_b)


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear input width {x.shape[-1]} does not match weights {weight.shape}")
    return ad.matmul(x, weight) + bias


class PromptBank:
    """
    Every learnable prompt and generator, one independent set per missing type.

    Tensors are stored flat under dotted names such as
    ``complete.text.correlated.0`` or ``missing_image.common.prompt``. A family
    whose configured length is 0 owns no tensors.
    """

    def __init__(self, config: PromptConfig, encoder: EncoderConfig, seed: int = 0) -> None:
        self.config = config
        self.encoder = encoder
        self.params: Dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        for m in MissingType:
            self._build_missing_type(m)
        del self._rng
        logger.debug(
            f"Prompt bank built: {len(self.params)} tensors, {self.num_parameters()} parameters "
            f"(L_R={config.correlated_length}, L_D={config.dynamic_length}, L_C={config.common_length})."
        )

    @classmethod
    def build(cls, config: PromptConfig, encoder: EncoderConfig, seed: int = 0) -> "PromptBank":
        return cls(config, encoder, seed)

    # --- Construction ---

    def _normal(self, name: str, shape: Tuple[int, ...]) -> None:
        self.params[name] = Tensor(self._rng.normal(0.0, self.config.init_std, shape), requires_grad=True, name=name)

    def _const(self, name: str, shape: Tuple[int, ...], value: float) -> None:
        self.params[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

    def _add_bottleneck(self, prefix: str, width_in: int, hidden: int, width_out: int) -> None:
        self._normal(f"{prefix}.fc1", (width_in, hidden))
        self._const(f"{prefix}.fc1_b", (hidden,), 0.0)
        self._normal(f"{prefix}.fc2", (hidden, width_out))
        self._const(f"{prefix}.fc2_b", (width_out,), 0.0)
        self._const(f"{prefix}.ln_g", (width_out,), 1.0)
        self._const(f"{prefix}.ln_b", (width_out,), 0.0)

    def _add_linear(self, prefix: str, width_in: int, width_out: int) -> None:
        self._normal(f"{prefix}.w", (width_in, width_out))
        self._const(f"{prefix}.b", (width_out,), 0.0)

    def _build_missing_type(self, m: MissingType) -> None:
        cfg, d, depth = self.config, self.encoder.d_model, self.encoder.prompt_depth
        chain_in = 2 * d if cfg.modal_mode is ModalMode.BI else d

        for stream in STREAMS:
            p = f"{m.value}.{stream.value}"
            if cfg.correlated_length:
                self._normal(f"{p}.correlated.0", (cfg.correlated_length, d))
                for i in range(1, depth):
                    if cfg.generator is GeneratorKind.NONE:
                        self._normal(f"{p}.correlated.{i}", (cfg.correlated_length, d))
                    elif cfg.generator is GeneratorKind.FC:
                        self._add_linear(f"{p}.chain.{i}", chain_in, d)
                    else:
                        self._add_bottleneck(f"{p}.chain.{i}", chain_in, bottleneck_hidden(chain_in, cfg.reduction), d)

            if cfg.dynamic_length:
                q = f"{p}.dynamic"
                if cfg.dynamic_op is DynamicOp.ATTENTION:
                    self._normal(f"{q}.queries", (cfg.dynamic_length, d))
                    for proj in ("wq", "wk", "wv", "wo"):
                        self._normal(f"{q}.{proj}", (d, d))
                    self._const(f"{q}.ln_attn_g", (d,), 1.0)
                    self._const(f"{q}.ln_attn_b", (d,), 0.0)
                    self._add_bottleneck(f"{q}.mlp", d, bottleneck_hidden(d, cfg.dynamic_reduction), d)
                else:
                    self._add_linear(f"{q}.fc", d, cfg.dynamic_length * d)
                    self._const(f"{q}.ln_g", (d,), 1.0)
                    self._const(f"{q}.ln_b", (d,), 0.0)

            if cfg.common_length:
                if cfg.common_projector is CommonProjector.MLP:
                    self._add_bottleneck(f"{p}.common", d, bottleneck_hidden(d, cfg.common_reduction), d)
                else:
                    self._add_linear(f"{p}.common", d, d)

        if cfg.common_length:
            self._normal(f"{m.value}.common.prompt", (cfg.common_length, d))

    # --- Access ---

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def bottleneck(self, prefix: str) -> BottleneckParams:
        return BottleneckParams(
            fc1=self.params[f"{prefix}.fc1"],
            fc1_b=self.params[f"{prefix}.fc1_b"],
            fc2=self.params[f"{prefix}.fc2"],
            fc2_b=self.params[f"{prefix}.fc2_b"],
            ln_g=self.params[f"{prefix}.ln_g"],
            ln_b=self.params[f"{prefix}.ln_b"],
        )

    def trainable_params(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def params_for(self, m: MissingType) -> Dict[str, Tensor]:
        prefix = f"{m.value}."
        return {name: t for name, t in self.params.items() if name.startswith(prefix)}

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def save(self, directory: str | Path) -> None:
        save_archive(directory, {name: t.data for name, t in self.params.items()})

    def load(self, directory: str | Path) -> None:
        loaded = load_archive(directory)
        extra = set(loaded) - set(self.params)
        if extra:
            raise InputError(f"prompt archive '{directory}' has unknown tensors: {sorted(extra)[:5]}")
        for name, tensor in self.params.items():
            if name not in loaded:
                raise InputError(f"prompt archive '{directory}' has no tensor '{name}'")
            if loaded[name].shape != tensor.shape:
                raise ShapeError(f"archive tensor '{name}' has shape {loaded[name].shape}, expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(loaded[name])
        logger.info(f"Prompt bank loaded from '{directory}'.")


# --- Generation ---

def correlated_chain(bank: PromptBank, m: MissingType) -> Dict[ModalityKind, List[Optional[Tensor]]]:
    """
    Correlated prompts for layers 0..J-1 of both streams. Layer 0 holds the free
    prompts; layer i is generated from layer i-1 only, so the chain never
    depends on a sample.
    """
    cfg, depth = bank.config, bank.encoder.prompt_depth
    if not cfg.correlated_length:
        return {stream: [None] * depth for stream in STREAMS}

    chain: Dict[ModalityKind, List[Optional[Tensor]]] = {
        stream: [bank[f"{m.value}.{stream.value}.correlated.0"]] for stream in STREAMS
    }
    for i in range(1, depth):
        prev_text = chain[ModalityKind.TEXT][i - 1]
        prev_image = chain[ModalityKind.IMAGE][i - 1]
        for stream in STREAMS:
            p = f"{m.value}.{stream.value}"
            if cfg.generator is GeneratorKind.NONE:
                chain[stream].append(bank[f"{p}.correlated.{i}"])
                continue
            if cfg.modal_mode is ModalMode.BI:
                source = ad.concat_last_axis(prev_image, prev_text)
            else:
                source = prev_text if stream is ModalityKind.TEXT else prev_image
            if cfg.generator is GeneratorKind.FC:
                generated = _linear(source, bank[f"{p}.chain.{i}.w"], bank[f"{p}.chain.{i}.b"])
            else:
                generated = bottleneck_mlp(bank.bottleneck(f"{p}.chain.{i}"), source)
            chain[stream].append(generated)
    return chain


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.permute(*axes)


def dynamic_prompt(bank: PromptBank, m: MissingType, stream: ModalityKind, x0: Tensor) -> Optional[Tensor]:
    """
    Input-conditioned prompts [L_D x d] (or [B x L_D x d] for a batch) from the
    embedded input ``x0``. Output length does not depend on the input length.
    """
    if not m.present(stream):
        raise ContractError(f"no dynamic prompt for the {stream.value} stream: it is absent under {m.value}")
    cfg = bank.config
    if not cfg.dynamic_length:
        return None

    d = bank.encoder.d_model
    if x0.shape[-1] != d:
        raise ShapeError(f"dynamic generator expects width {d}, got input shape {x0.shape}")
    unbatched = x0.ndim == 2
    x = x0.reshape(1, *x0.shape) if unbatched else x0
    batch = x.shape[0]
    q = f"{m.value}.{stream.value}.dynamic"

    if cfg.dynamic_op is DynamicOp.ATTENTION:
        queries = ad.matmul(bank[f"{q}.queries"], bank[f"{q}.wq"])
        keys = ad.matmul(x, bank[f"{q}.wk"])
        values = ad.matmul(x, bank[f"{q}.wv"])
        scores = ad.matmul(queries, _swap_last(keys)) * (1.0 / math.sqrt(d))
        attended = ad.matmul(ad.matmul(ad.softmax_rows(scores), values), bank[f"{q}.wo"])
        normed = ad.layernorm(attended, bank[f"{q}.ln_attn_g"], bank[f"{q}.ln_attn_b"])
        out = bottleneck_mlp(bank.bottleneck(f"{q}.mlp"), normed)
    else:
        if cfg.dynamic_op is DynamicOp.MAX:
            pooled = ad.reduce_max(x, axis=-2)
        elif cfg.dynamic_op is DynamicOp.MIN:
            pooled = ad.reduce_min(x, axis=-2)
        else:
            pooled = x.mean(axis=-2)
        flat = _linear(pooled, bank[f"{q}.fc.w"], bank[f"{q}.fc.b"])
        out = ad.layernorm(flat.reshape(batch, cfg.dynamic_length, d), bank[f"{q}.ln_g"], bank[f"{q}.ln_b"])

    return out.reshape(cfg.dynamic_length, d) if unbatched else out


def common_prompts(bank: PromptBank, m: MissingType) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """(text, image) projections of the one modal-common prompt of ``m``."""
    cfg = bank.config
    if not cfg.common_length:
        return None, None
    shared = bank[f"{m.value}.common.prompt"]
    projected = []
    for stream in STREAMS:
        p = f"{m.value}.{stream.value}.common"
        if cfg.common_projector is CommonProjector.MLP:
            projected.append(bottleneck_mlp(bank.bottleneck(p), shared))
        else:
            projected.append(_linear(shared, bank[f"{p}.w"], bank[f"{p}.b"]))
    return projected[0], projected[1]


# --- Assembly and routing ---

@dataclass
class AssembledPrompts:
    """
    Per present stream: the input-level block [correlated; dynamic; common] and
    the deep correlated prompts of layers 1..J-1. ``batch_size`` is set when the
    prompts were assembled for a batched forward pass.
    """
    missing_type: MissingType
    input_prompts: Dict[ModalityKind, Optional[Tensor]] = field(default_factory=dict)
    deep_correlated: Dict[ModalityKind, List[Optional[Tensor]]] = field(default_factory=dict)
    batch_size: Optional[int] = None

    def _batched(self, block: Optional[Tensor]) -> Optional[Tensor]:
        if block is None or self.batch_size is None or block.ndim == 3:
            return block
        return ad.broadcast_to(block, (self.batch_size, *block.shape))

    def layer_prompts(self, stream: ModalityKind, depth: int) -> List[Optional[Tensor]]:
        if stream not in self.input_prompts:
            raise ContractError(f"{stream.value} stream was not assembled under {self.missing_type.value}")
        layers = [self.input_prompts[stream]] + [self._batched(p) for p in self.deep_correlated[stream]]
        if len(layers) != depth:
            raise ContractError(f"assembled {len(layers)} prompt layers, encoder expects {depth}")
        return layers


def assemble(
    bank: PromptBank, m: MissingType, x0_text: Optional[Tensor], x0_image: Optional[Tensor]
) -> AssembledPrompts:
    embedded = {ModalityKind.TEXT: x0_text, ModalityKind.IMAGE: x0_image}
    for stream, x0 in embedded.items():
        if (x0 is not None) != m.present(stream):
            state = "given" if x0 is not None else "missing"
            raise ContractError(f"{stream.value} input is {state} but missing type is {m.value}")

    batch_size = next((x.shape[0] for x in embedded.values() if x is not None and x.ndim == 3), None)
    assembled = AssembledPrompts(missing_type=m, batch_size=batch_size)
    chain = correlated_chain(bank, m)
    common = dict(zip(STREAMS, common_prompts(bank, m)))

    for stream in STREAMS:
        x0 = embedded[stream]
        if x0 is None:
            continue
        blocks = [
            assembled._batched(chain[stream][0]),
            dynamic_prompt(bank, m, stream, x0),
            assembled._batched(common[stream]),
        ]
        present_blocks = [b for b in blocks if b is not None]
        assembled.input_prompts[stream] = ad.concat_rows(present_blocks) if present_blocks else None
        assembled.deep_correlated[stream] = chain[stream][1:]
    return assembled


def route(sample: "Sample") -> MissingType:
    has_text = sample.text_tokens is not None
    has_image = sample.image_patches is not None
    if has_text and has_image:
        return MissingType.COMPLETE
    if has_image:
        return MissingType.MISSING_TEXT
    if has_text:
        return MissingType.MISSING_IMAGE
    raise InputError(f"sample {sample.index} has neither modality")
