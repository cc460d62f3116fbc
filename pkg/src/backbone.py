# src/backbone.py

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src import tensor_autodiff as ad
from src.errors import ContractError, InputError, ShapeError
from src.models import EncoderConfig, MissingType, ModalityKind
from src.tensor_autodiff import Tensor
from src.weight_archive import load_archive, save_archive

if TYPE_CHECKING:
    from src.missing_sim import Sample
    from src.prompt_engine import PromptBank

logger = logging.getLogger(__name__)

STREAMS = (ModalityKind.TEXT, ModalityKind.IMAGE)
HEAD_PREFIX = "head."


@dataclass(frozen=True)
class StreamInput:
    """
    One stream's payload for a batch: token ids [B x L] for text or patch
    vectors [B x L x patch_dim] for images. ``present = False`` means the
    encoder must not run.
    """
    values: Optional[np.ndarray]
    present: bool = True

    @classmethod
    def absent(cls) -> "StreamInput":
        return cls(values=None, present=False)


class Backbone:
    """
    Frozen two-stream transformer plus the trainable fc head.

    Parameters live in ``self.params`` keyed by dotted names
    (``text.layer0.wq``, ``head.weight``...). Only ``head.*`` requires grad;
    everything else is frozen.
    """

    def __init__(self, config: EncoderConfig, n_outputs: int, seed: int = 0) -> None:
        self.config = config
        self.n_outputs = n_outputs
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, ff = config.d_model, config.ff_width

        for stream in STREAMS:
            p = stream.value
            if stream is ModalityKind.TEXT:
                self._add(f"{p}.token_table", rng.normal(0.0, 1.0, (config.vocab_size, d)))
            else:
                self._add(f"{p}.patch_w", rng.normal(0.0, 1.0 / math.sqrt(config.patch_dim), (config.patch_dim, d)))
                self._add(f"{p}.patch_b", np.zeros(d))
            self._add(f"{p}.pos", rng.normal(0.0, 0.1, (config.max_seq_len + 1, d)))
            self._add(f"{p}.task_token", rng.normal(0.0, 1.0, (1, d)))
            for i in range(config.n_layers):
                lp = f"{p}.layer{i}"
                self._add(f"{lp}.ln1_g", np.ones(d))
                self._add(f"{lp}.ln1_b", np.zeros(d))
                for proj in ("wq", "wk", "wv", "wo"):
                    self._add(f"{lp}.{proj}", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
                    self._add(f"{lp}.{proj}_b", np.zeros(d))
                self._add(f"{lp}.ln2_g", np.ones(d))
                self._add(f"{lp}.ln2_b", np.zeros(d))
                self._add(f"{lp}.ff1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, ff)))
                self._add(f"{lp}.ff1_b", np.zeros(ff))
                self._add(f"{lp}.ff2", rng.normal(0.0, 1.0 / math.sqrt(ff), (ff, d)))
                self._add(f"{lp}.ff2_b", np.zeros(d))
            self._add(f"{p}.lnf_g", np.ones(d))
            self._add(f"{p}.lnf_b", np.zeros(d))

        self._add(f"{HEAD_PREFIX}weight", rng.normal(0.0, 0.02, (2 * d, n_outputs)), trainable=True)
        self._add(f"{HEAD_PREFIX}bias", np.zeros(n_outputs), trainable=True)
        logger.debug(f"Backbone initialised with {len(self.params)} tensors (seed {seed}).")

    def _add(self, name: str, value: np.ndarray, trainable: bool = False) -> None:
        self.params[name] = Tensor(value, requires_grad=trainable, name=name)

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # --- Parameter bookkeeping ---

    def trainable_params(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if name.startswith(HEAD_PREFIX)}

    def frozen_params(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.params.items() if not name.startswith(HEAD_PREFIX)}

    def frozen_bytes(self) -> bytes:
        """Concatenated raw bytes of every frozen tensor, in name order."""
        return b"".join(self.params[name].data.tobytes() for name in sorted(self.frozen_params()))

    def save(self, directory: str | Path) -> None:
        save_archive(directory, {name: t.data for name, t in self.params.items()})

    def load(self, directory: str | Path) -> None:
        loaded = load_archive(directory)
        for name, tensor in self.params.items():
            if name not in loaded:
                raise InputError(f"weight archive '{directory}' has no tensor '{name}'")
            if loaded[name].shape != tensor.shape:
                raise ShapeError(f"archive tensor '{name}' has shape {loaded[name].shape}, expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(loaded[name])
        logger.info(f"Backbone weights loaded from '{directory}'.")

    # --- Forward pass ---

    def embed(self, stream: ModalityKind, stream_input: StreamInput) -> Tensor:
        """
        Embeds one stream and prepends the task token at row 0. A batch gives
        [B x (L+1) x d]; a single sample (ids [L] or patches [L x patch_dim])
        gives [(L+1) x d].
        """
        if not stream_input.present or stream_input.values is None:
            raise ContractError(f"cannot embed the absent {stream.value} stream")
        p = stream.value
        values = np.asarray(stream_input.values)
        unbatched = values.ndim == (1 if stream is ModalityKind.TEXT else 2)
        if unbatched:
            values = values[None]

        if stream is ModalityKind.TEXT:
            if values.ndim != 2:
                raise ShapeError(f"text input must be [batch x length], got shape {values.shape}")
            if values.size and (values.min() < 0 or values.max() >= self.config.vocab_size):
                raise InputError(f"token id outside vocabulary of size {self.config.vocab_size}")
            tokens = ad.take_rows(self._p(f"{p}.token_table"), values)
        else:
            if values.ndim != 3 or values.shape[-1] != self.config.patch_dim:
                raise ShapeError(
                    f"image input must be [batch x length x {self.config.patch_dim}], got shape {values.shape}"
                )
            tokens = ad.matmul(ad.as_tensor(values), self._p(f"{p}.patch_w")) + self._p(f"{p}.patch_b")

        batch, length = tokens.shape[0], tokens.shape[1]
        if length > self.config.max_seq_len:
            raise InputError(f"{p} sequence length {length} exceeds max_seq_len {self.config.max_seq_len}")
        task = ad.broadcast_to(self._p(f"{p}.task_token"), (batch, 1, self.config.d_model))
        seq = ad.concat_rows([task, tokens])
        pos = ad.slice_axis(self._p(f"{p}.pos"), 0, 0, length + 1)
        out = seq + pos
        return out.reshape(length + 1, self.config.d_model) if unbatched else out

    def _attention(self, lp: str, h: Tensor) -> Tensor:
        batch, seq, d = h.shape
        heads = self.config.n_heads
        dh = d // heads

        def split(proj: str) -> Tensor:
            x = ad.matmul(h, self._p(f"{lp}.{proj}")) + self._p(f"{lp}.{proj}_b")
            return x.reshape(batch, seq, heads, dh).permute(0, 2, 1, 3)

        q, k, v = split("wq"), split("wk"), split("wv")
        scores = ad.matmul(q, k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        mixed = ad.matmul(ad.softmax_rows(scores), v)
        merged = mixed.permute(0, 2, 1, 3).reshape(batch, seq, d)
        return ad.matmul(merged, self._p(f"{lp}.wo")) + self._p(f"{lp}.wo_b")

    def layer_forward(self, stream: ModalityKind, i: int, x: Tensor) -> Tensor:
        """One pre-LN encoder block on [B x S x d] (or a single [S x d] sequence)."""
        if x.ndim == 2:
            return self.layer_forward(stream, i, x.reshape(1, *x.shape)).reshape(*x.shape)
        lp = f"{stream.value}.layer{i}"
        h = ad.layernorm(x, self._p(f"{lp}.ln1_g"), self._p(f"{lp}.ln1_b"))
        x = x + self._attention(lp, h)
        h = ad.layernorm(x, self._p(f"{lp}.ln2_g"), self._p(f"{lp}.ln2_b"))
        h = ad.gelu(ad.matmul(h, self._p(f"{lp}.ff1")) + self._p(f"{lp}.ff1_b"))
        return x + ad.matmul(h, self._p(f"{lp}.ff2")) + self._p(f"{lp}.ff2_b")

    def prompted_layer_forward(
        self, stream: ModalityKind, i: int, prompts: Optional[Tensor], feats: Tensor, retain: bool
    ) -> Tuple[Optional[Tensor], Tensor]:
        """
        Runs layer ``i`` on [prompts; feats]. Returns the prompt-position outputs
        only when ``retain`` is set, and always the feature rows.
        """
        if prompts is None:
            return None, self.layer_forward(stream, i, feats)
        if prompts.shape[-1] != feats.shape[-1]:
            raise ShapeError(f"prompt width {prompts.shape} does not match feature width {feats.shape}")
        if prompts.ndim < feats.ndim:
            prompts = ad.broadcast_to(prompts, (*feats.shape[:-2], *prompts.shape))
        n_prompt = prompts.shape[-2]
        out = self.layer_forward(stream, i, ad.concat_rows([prompts, feats]))
        total = out.shape[-2]
        new_feats = ad.slice_axis(out, -2, n_prompt, total)
        new_prompts = ad.slice_axis(out, -2, 0, n_prompt) if retain else None
        return new_prompts, new_feats

    def forward_stream(
        self,
        stream: ModalityKind,
        stream_input: StreamInput,
        layer_prompts: Optional[Sequence[Optional[Tensor]]] = None,
        embedded: Optional[Tensor] = None,
    ) -> Tensor:
        """
        Returns the task token [B x d] of one stream. ``layer_prompts[i]`` feeds
        layer i < J; from layer J on, the previous layer's prompt outputs are fed
        forward. An absent stream returns zeros without running the encoder.
        """
        cfg = self.config
        if not stream_input.present:
            return ad.zeros(cfg.d_model)

        depth = cfg.prompt_depth
        if layer_prompts is not None and len(layer_prompts) != depth:
            raise ContractError(f"expected {depth} layer prompt entries, got {len(layer_prompts)}")

        x = embedded if embedded is not None else self.embed(stream, stream_input)
        carried: Optional[Tensor] = None
        for i in range(cfg.n_layers):
            prompts = carried if i >= depth else (layer_prompts[i] if layer_prompts is not None else None)
            # Prompt outputs are kept only where a later layer consumes them.
            retain = depth - 1 <= i < cfg.n_layers - 1
            carried, x = self.prompted_layer_forward(stream, i, prompts, x, retain)

        x = ad.layernorm(x, self._p(f"{stream.value}.lnf_g"), self._p(f"{stream.value}.lnf_b"))
        task = ad.slice_axis(x, -2, 0, 1)
        return task.reshape(cfg.d_model) if x.ndim == 2 else task.reshape(x.shape[0], cfg.d_model)

    def classify(self, fused: Tensor) -> Tensor:
        """The fc head over fused task tokens [..., 2d]."""
        return ad.matmul(fused, self._p(f"{HEAD_PREFIX}weight")) + self._p(f"{HEAD_PREFIX}bias")

    def fused_tokens(
        self, samples: Sequence["Sample"], missing_type: MissingType, bank: Optional["PromptBank"] = None
    ) -> Tensor:
        """Text and image task tokens side by side, [B x 2d], for samples that all share ``missing_type``."""
        from src.missing_sim import stack_stream
        from src.prompt_engine import assemble, route

        for sample in samples:
            if route(sample) is not missing_type:
                raise ContractError(
                    f"sample {sample.index} is {route(sample).value}, batch was routed as {missing_type.value}"
                )

        batch = len(samples)
        inputs = {stream: stack_stream(samples, stream) for stream in STREAMS}
        embedded = {
            stream: self.embed(stream, inputs[stream]) if inputs[stream].present else None
            for stream in STREAMS
        }

        assembled = None
        if bank is not None and bank.config.total_length > 0:
            assembled = assemble(bank, missing_type, embedded[ModalityKind.TEXT], embedded[ModalityKind.IMAGE])

        tokens: List[Tensor] = []
        for stream in STREAMS:
            if embedded[stream] is None:
                tokens.append(ad.zeros(batch, self.config.d_model))
                continue
            layer_prompts = assembled.layer_prompts(stream, self.config.prompt_depth) if assembled else None
            tokens.append(self.forward_stream(stream, inputs[stream], layer_prompts, embedded=embedded[stream]))
        return ad.concat_last_axis(tokens[0], tokens[1])

    def forward_batch(
        self, samples: Sequence["Sample"], missing_type: MissingType, bank: Optional["PromptBank"] = None
    ) -> Tensor:
        """Logits [B x n_outputs] for samples that all share ``missing_type``."""
        return self.classify(self.fused_tokens(samples, missing_type, bank))

    def forward_model(self, sample: "Sample", missing_type: MissingType, bank: Optional["PromptBank"] = None) -> Tensor:
        """Logits [n_outputs] for one sample."""
        logits = self.forward_batch([sample], missing_type, bank)
        return logits.reshape(self.n_outputs)


def param_census(model: Backbone, bank: Optional["PromptBank"] = None) -> Tuple[int, int, float]:
    """(trainable, total, trainable / total) with trainable = prompt bank + fc head."""
    head = sum(t.data.size for t in model.trainable_params().values())
    frozen = sum(t.data.size for t in model.frozen_params().values())
    prompts = bank.num_parameters() if bank is not None else 0
    trainable = head + prompts
    total = trainable + frozen
    return trainable, total, trainable / total
