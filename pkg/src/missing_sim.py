# src/missing_sim.py

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import jsonlines
import numpy as np
from scipy.special import logsumexp

from src.errors import ConfigError, ContractError, InputError
from src.models import LabelMode, MissingCase, MissingSpec, MissingType, ModalityKind

if TYPE_CHECKING:
    from src.backbone import StreamInput

logger = logging.getLogger(__name__)

Label = Union[int, Tuple[int, ...]]


@dataclass(frozen=True, eq=False)
class Sample:
    """
    One paired example. A dropped modality has its payload set to None; the
    ``missing`` flag always agrees with which payloads are present.
    """
    index: int
    text_tokens: Optional[np.ndarray]
    image_patches: Optional[np.ndarray]
    label: Label
    missing: MissingType = MissingType.COMPLETE

    def __post_init__(self) -> None:
        if self.text_tokens is None and self.image_patches is None:
            raise InputError(f"sample {self.index} has neither modality")
        if self.missing.present(ModalityKind.TEXT) != (self.text_tokens is not None) or (
            self.missing.present(ModalityKind.IMAGE) != (self.image_patches is not None)
        ):
            raise InputError(f"sample {self.index} is flagged {self.missing.value} but its payloads disagree")

    @property
    def is_complete(self) -> bool:
        return self.missing is MissingType.COMPLETE

    def label_vector(self, n_classes: int) -> np.ndarray:
        """One-hot (single-label) or bit vector (multi-label) of length ``n_classes``."""
        if isinstance(self.label, tuple):
            return np.asarray(self.label, dtype=np.float64)
        vec = np.zeros(n_classes)
        vec[self.label] = 1.0
        return vec


def _check_noise(noise: float) -> None:
    if not 0.0 <= noise < 0.5 or math.isnan(noise):
        raise ConfigError(f"noise must be in [0, 0.5), got {noise}")


@dataclass(frozen=True)
class SyntheticTask:
    """
    The keyed codebooks behind a synthetic dataset.

    Text: position p of a sample of class c holds one of the ``synonyms`` tokens
    ``text_key[p, c, :]``. Image: patch p holds one of the ``modes`` prototypes
    ``prototypes[c, :, p]`` plus Gaussian jitter. Each sample draws
    one decoy value per modality; a corrupted token or patch (probability
    ``noise`` each) shows the decoy's code instead of the true one. In
    multi-label mode position p carries bit ``p % n_classes`` and the decoy of
    a bit is its complement.
    """
    n_classes: int
    noise: float
    jitter: float
    label_mode: LabelMode
    text_key: np.ndarray  # [positions x codes x synonyms]
    prototypes: np.ndarray  # [codes x modes x patches x dim]

    @classmethod
    def build(
        cls,
        n_classes: int,
        noise: float,
        seed: int,
        *,
        vocab_size: int = 16384,
        text_len: int = 8,
        n_patches: int = 6,
        patch_dim: int = 8,
        jitter: float = 0.3,
        label_mode: LabelMode = LabelMode.SINGLE,
        synonyms: int = 1,
        modes: int = 1,
    ) -> "SyntheticTask":
        if n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
        _check_noise(noise)
        n_codes = 2 if label_mode is LabelMode.MULTILABEL else n_classes
        if synonyms < 1 or modes < 1:
            raise ConfigError(f"synonyms and modes must be >= 1, got {synonyms} and {modes}")
        if n_codes * synonyms > vocab_size:
            raise ConfigError(f"vocab_size {vocab_size} cannot hold {n_codes} x {synonyms} tokens per position")
        if label_mode is LabelMode.MULTILABEL and (text_len < n_classes or n_patches < n_classes):
            raise ConfigError("multilabel mode needs text_len and n_patches >= n_classes")

        rng = np.random.default_rng([seed, 0])
        text_key = np.stack([
            rng.choice(vocab_size, size=n_codes * synonyms, replace=False).reshape(n_codes, synonyms)
            for _ in range(text_len)
        ])
        prototypes = rng.normal(0.0, 1.0, (n_codes, modes, n_patches, patch_dim))
        return cls(n_classes, noise, jitter, label_mode, text_key.astype(np.int64), prototypes)

    @property
    def text_len(self) -> int:
        return self.text_key.shape[0]

    @property
    def n_patches(self) -> int:
        return self.prototypes.shape[2]

    @property
    def synonyms(self) -> int:
        return self.text_key.shape[2]

    @property
    def modes(self) -> int:
        return self.prototypes.shape[1]

    def _variant(self, count: int, length: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(count, size=length) if count > 1 else np.zeros(length, dtype=np.int64)

    def _codes(self, label: Label, length: int) -> np.ndarray:
        """Per-position code index of ``label``."""
        if self.label_mode is LabelMode.MULTILABEL:
            bits = np.asarray(label, dtype=np.int64)
            return bits[np.arange(length) % self.n_classes]
        return np.full(length, int(label), dtype=np.int64)

    def _decoy_codes(self, label: Label, length: int, rng: np.random.Generator) -> np.ndarray:
        if self.label_mode is LabelMode.MULTILABEL:
            return 1 - self._codes(label, length)
        others = [c for c in range(self.n_classes) if c != label]
        return np.full(length, others[rng.integers(len(others))], dtype=np.int64)

    def draw(self, index: int, rng: np.random.Generator) -> Sample:
        if self.label_mode is LabelMode.MULTILABEL:
            label: Label = tuple(int(b) for b in rng.integers(0, 2, self.n_classes))
        else:
            label = int(rng.integers(self.n_classes))

        positions = np.arange(self.text_len)
        codes = self._codes(label, self.text_len)
        decoys = self._decoy_codes(label, self.text_len, rng)
        corrupt = rng.random(self.text_len) < self.noise
        synonym = self._variant(self.synonyms, self.text_len, rng)
        tokens = self.text_key[positions, np.where(corrupt, decoys, codes), synonym]

        patch_idx = np.arange(self.n_patches)
        codes = self._codes(label, self.n_patches)
        decoys = self._decoy_codes(label, self.n_patches, rng)
        corrupt = rng.random(self.n_patches) < self.noise
        mode = self._variant(self.modes, self.n_patches, rng)
        patches = self.prototypes[np.where(corrupt, decoys, codes), mode, patch_idx]
        patches = patches + rng.normal(0.0, self.jitter, patches.shape) if self.jitter > 0 else patches.copy()
        return Sample(index=index, text_tokens=tokens, image_patches=patches, label=label)

    # --- Exact decoder ---

    def _position_loglik(self, sample: Sample) -> np.ndarray:
        """
        [positions x codes x codes] log-likelihood of each observed position
        given (true code, decoy code), stacked over whichever modalities are present.
        Rows are indexed by text position first, then patch position.
        """
        log_keep = math.log1p(-self.noise)
        log_flip = math.log(self.noise) if self.noise > 0 else -np.inf
        blocks = []
        if sample.text_tokens is not None:
            hit = (self.text_key == np.asarray(sample.text_tokens)[:, None, None]).any(axis=-1)  # [L x codes]
            with np.errstate(divide="ignore"):
                keep = np.where(hit, log_keep, -np.inf)
                flip = np.where(hit, log_flip, -np.inf)
            blocks.append(np.logaddexp(keep[:, :, None], flip[:, None, :]))
        if sample.image_patches is not None:
            diff = np.asarray(sample.image_patches)[None, None, :, :] - self.prototypes  # [codes x modes x P x dim]
            var = max(self.jitter, 1e-6) ** 2
            per_mode = -0.5 * np.sum(diff * diff, axis=-1) / var
            dens = (logsumexp(per_mode, axis=1) - math.log(self.modes)).T  # [P x codes]
            blocks.append(np.logaddexp(log_keep + dens[:, :, None], log_flip + dens[:, None, :]))
        if not blocks:
            raise InputError(f"sample {sample.index} has neither modality")
        return np.concatenate(blocks, axis=0)

    def log_posterior(self, sample: Sample) -> np.ndarray:
        """Unnormalised log posterior over classes (single-label) or over each bit's value [C x 2]."""
        per_pos = self._position_loglik(sample)
        if self.label_mode is LabelMode.MULTILABEL:
            lengths = []
            if sample.text_tokens is not None:
                lengths.append(np.arange(self.text_len) % self.n_classes)
            if sample.image_patches is not None:
                lengths.append(np.arange(self.n_patches) % self.n_classes)
            bit_of = np.concatenate(lengths)
            out = np.zeros((self.n_classes, 2))
            for value in (0, 1):
                # Decoy of a bit is its complement.
                contrib = per_pos[:, value, 1 - value]
                out[:, value] = np.bincount(bit_of, weights=contrib, minlength=self.n_classes)
            return out

        total = np.zeros(self.n_classes)
        offset = 0
        for length, present in (
            (self.text_len, sample.text_tokens is not None),
            (self.n_patches, sample.image_patches is not None),
        ):
            if not present:
                continue
            block = per_pos[offset:offset + length].sum(axis=0)  # [true x decoy]
            offset += length
            np.fill_diagonal(block, -np.inf)
            total += logsumexp(block, axis=1) - math.log(self.n_classes - 1)
        return total

    def decode(self, sample: Sample) -> Label:
        post = self.log_posterior(sample)
        if self.label_mode is LabelMode.MULTILABEL:
            return tuple(int(b) for b in np.argmax(post, axis=1))
        return int(np.argmax(post))

    def decode_accuracy(self, samples: Sequence[Sample]) -> float:
        if not samples:
            raise InputError("cannot score an empty sample list")
        return float(np.mean([self.decode(s) == s.label for s in samples]))


def make_dataset(
    n: int,
    n_classes: int,
    noise: float,
    seed: int,
    *,
    vocab_size: int = 16384,
    text_len: int = 8,
    n_patches: int = 6,
    patch_dim: int = 8,
    jitter: float = 0.3,
    label_mode: LabelMode = LabelMode.SINGLE,
    synonyms: int = 1,
    modes: int = 1,
) -> List[Sample]:
    """``n`` complete samples; the same seed always yields the same dataset."""
    if n < 0:
        raise ConfigError(f"dataset size must be >= 0, got {n}")
    task = SyntheticTask.build(
        n_classes, noise, seed,
        vocab_size=vocab_size, text_len=text_len, n_patches=n_patches,
        patch_dim=patch_dim, jitter=jitter, label_mode=label_mode,
        synonyms=synonyms, modes=modes,
    )
    rng = np.random.default_rng([seed, 1])
    samples = [task.draw(i, rng) for i in range(n)]
    logger.debug(f"Generated {n} samples ({n_classes} classes, noise {noise}, seed {seed}).")
    return samples


def derive_seed(seed: int, *keys: int) -> int:
    """A child seed that depends only on (seed, keys)."""
    return int(np.random.default_rng([seed, *keys]).integers(2**31))


def missing_counts(n: int, spec: MissingSpec) -> Tuple[int, int, int]:
    """(text-only, image-only, complete) counts for ``n`` samples."""
    if spec.case is MissingCase.BOTH:
        half = math.floor(round(spec.eta * n / 2, 9))
        return half, half, n - 2 * half
    dropped = math.floor(round(spec.eta * n, 9))
    if spec.case is MissingCase.TEXT_MISSING:
        return 0, dropped, n - dropped
    return dropped, 0, n - dropped


def drop_modality(sample: Sample, missing: MissingType) -> Sample:
    return replace(
        sample,
        text_tokens=sample.text_tokens if missing.present(ModalityKind.TEXT) else None,
        image_patches=sample.image_patches if missing.present(ModalityKind.IMAGE) else None,
        missing=missing,
    )


def apply_missing(dataset: Sequence[Sample], spec: MissingSpec, seed: int) -> List[Sample]:
    """Drops modalities from a seeded random subset, in the exact closed-form counts."""
    if any(not s.is_complete for s in dataset):
        raise ContractError("apply_missing needs complete samples")
    n = len(dataset)
    text_only, image_only, _ = missing_counts(n, spec)
    order = np.random.default_rng(seed).permutation(n)
    # Plain list: numpy coerces str-enums to truncated strings.
    flags = [MissingType.COMPLETE] * n
    for i in order[:text_only]:
        flags[i] = MissingType.MISSING_IMAGE
    for i in order[text_only:text_only + image_only]:
        flags[i] = MissingType.MISSING_TEXT
    result = [s if flag is MissingType.COMPLETE else drop_modality(s, flag) for s, flag in zip(dataset, flags)]
    logger.debug(
        f"Missing composition ({spec.case.value}, eta={spec.eta}): "
        f"{text_only} text-only, {image_only} image-only, {n - text_only - image_only} complete."
    )
    return result


def split(
    dataset: Sequence[Sample],
    fractions: Sequence[float],
    seed: int,
    spec: Optional[MissingSpec] = None,
) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """
    Seeded disjoint (train, val, test) partition. With ``spec`` the missing
    composition is applied to each split independently.
    """
    if len(fractions) != 3 or any(f < 0 or math.isnan(f) for f in fractions):
        raise ConfigError(f"split needs three non-negative fractions, got {list(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")

    n = len(dataset)
    n_train = math.floor(round(fractions[0] * n, 9))
    n_val = min(math.floor(round(fractions[1] * n, 9)), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    cuts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    parts = [[dataset[i] for i in sorted(idx)] for idx in cuts]

    if spec is not None:
        parts = [apply_missing(part, spec, derive_seed(seed, k)) for k, part in enumerate(parts, start=1)]
    return parts[0], parts[1], parts[2]


def stack_stream(samples: Sequence[Sample], stream: ModalityKind) -> "StreamInput":
    """Batches one stream's payloads; all samples must agree on its presence."""
    from src.backbone import StreamInput

    payloads = [s.text_tokens if stream is ModalityKind.TEXT else s.image_patches for s in samples]
    present = [p is not None for p in payloads]
    if not any(present):
        return StreamInput.absent()
    if not all(present):
        raise ContractError(f"batch mixes present and absent {stream.value} payloads")
    return StreamInput(values=np.stack(payloads))


# --- Dump / load ---

def _to_record(sample: Sample) -> dict:
    record = {
        "index": sample.index,
        "label": list(sample.label) if isinstance(sample.label, tuple) else sample.label,
        "missing": sample.missing.value,
    }
    if sample.text_tokens is not None:
        record["text_tokens"] = [int(t) for t in sample.text_tokens]
    if sample.image_patches is not None:
        record["image_patches"] = [[float(v) for v in row] for row in sample.image_patches]
    return record


def dump_dataset(path: str | Path, samples: Sequence[Sample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with jsonlines.open(path, mode="w") as writer:
        writer.write_all(_to_record(s) for s in samples)
    logger.info(f"Wrote {len(samples)} samples to '{path}'.")


def load_dataset(path: str | Path) -> List[Sample]:
    samples = []
    with jsonlines.open(path) as reader:
        for lineno, record in enumerate(reader, start=1):
            try:
                label = record["label"]
                samples.append(Sample(
                    index=int(record["index"]),
                    text_tokens=np.asarray(record["text_tokens"], dtype=np.int64) if "text_tokens" in record else None,
                    image_patches=np.asarray(record["image_patches"], dtype=np.float64) if "image_patches" in record else None,
                    label=tuple(label) if isinstance(label, list) else int(label),
                    missing=MissingType(record["missing"]),
                ))
            except (KeyError, ValueError, TypeError) as e:
                raise InputError(f"{path}:{lineno}: malformed sample record ({e})") from e
    return samples
