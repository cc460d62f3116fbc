# src/workers/cell_worker.py

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.backbone import Backbone, param_census
from src.metrics import MetricsReport
from src.missing_sim import apply_missing, derive_seed, make_dataset, split
from src.models import ExperimentConfig, MissingSpec, Variant, prompts_for_variant
from src.prompt_engine import PromptBank
from src.train_eval import EvalSlice, RunData, train_run

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "config_hash", "variant", "seed", "train_case", "train_eta", "eval_slice", "eval_case", "eval_eta",
    "loss", "accuracy", "f1_macro", "auroc", "trainable_params", "total_params",
]


def build_models(config: ExperimentConfig, variant: Variant, seed: int) -> tuple[Backbone, PromptBank]:
    """Frozen backbone (fixed backbone seed) and a fresh prompt bank for ``variant``."""
    encoder = config.encoder_config()
    model = Backbone(encoder, n_outputs=config.data.n_classes, seed=config.model.backbone_seed)
    if config.model.weights:
        model.load(config.model.weights)
    bank = PromptBank(prompts_for_variant(variant, config.prompts), encoder, seed=seed)
    return model, bank


@dataclass
class CellResult:
    variant: Variant
    seed: int
    eta: float
    report: MetricsReport
    csv_path: Optional[Path]
    rows: List[Dict[str, Any]] = field(default_factory=list)


class CellWorker:
    """
    Owns one grid cell (variant, seed, missing rate): builds its data, backbone
    and bank, trains, evaluates and writes the per-cell CSV. Safe to run on a
    worker thread; nothing is shared with other cells.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        config_hash: str,
        variant: Variant,
        seed: int,
        eta: float,
        out_dir: Optional[Path] = None,
        eval_threads: int = 1,
    ) -> None:
        self.config = config
        self.config_hash = config_hash
        self.variant = variant
        self.seed = seed
        self.eta = eta
        self.out_dir = out_dir
        self.eval_threads = eval_threads

    @property
    def name(self) -> str:
        return f"{self.variant.value}_seed{self.seed}_{self.config.missing.case.value}_eta{self.eta:g}"

    def build_data(self) -> RunData:
        cfg = self.config
        data = cfg.data
        dataset = make_dataset(
            data.n, data.n_classes, data.noise, self.seed,
            vocab_size=data.vocab_size, text_len=data.text_len, n_patches=data.n_patches,
            patch_dim=data.patch_dim, jitter=data.image_jitter, label_mode=data.label_mode,
            synonyms=data.text_synonyms, modes=data.image_modes,
        )
        spec = MissingSpec(case=cfg.missing.case, eta=self.eta)
        train, val, test = split(dataset, data.fractions, self.seed, spec)
        complete_train, _, complete_test = split(dataset, data.fractions, self.seed)

        case = cfg.missing.case.value
        slices = [EvalSlice(f"train/{case}", self.eta, train, every_epoch=cfg.training.eval_train_each_epoch)]
        if val:
            slices.append(EvalSlice(f"val/{case}", self.eta, val))
        slices.append(EvalSlice(f"test/{case}", self.eta, test))
        for k, eval_case in enumerate(cfg.missing.eval_cases, start=10):
            if eval_case is cfg.missing.case:
                continue
            cross = apply_missing(complete_test, MissingSpec(case=eval_case, eta=self.eta), derive_seed(self.seed, k))
            slices.append(EvalSlice(f"test/{eval_case.value}", self.eta, cross))

        return RunData(train=train, slices=slices, complete_train=complete_train, missing=spec)

    def run(self) -> CellResult:
        logger.info(f"Cell {self.name} started.")
        try:
            data = self.build_data()
            model, bank = build_models(self.config, self.variant, self.seed)
            report = train_run(model, bank, data, self.config, seed=self.seed, threads=self.eval_threads)
        except Exception as e:
            logger.error(f"Cell {self.name} failed: {e}", exc_info=True)
            raise

        csv_path = None
        if self.out_dir is not None:
            csv_path = self.out_dir / "cells" / f"{self.name}.csv"
            report.to_csv(csv_path, self.config_hash)

        result = CellResult(self.variant, self.seed, self.eta, report, csv_path, self.summary_rows(report))
        logger.info(f"Cell {self.name} finished.")
        return result

    def summary_rows(self, report: MetricsReport) -> List[Dict[str, Any]]:
        rows = []
        for row in report.last_epoch():
            eval_slice, eval_case = row.slice_case.split("/", 1)
            rows.append({
                "config_hash": self.config_hash,
                "variant": self.variant.value,
                "seed": self.seed,
                "train_case": self.config.missing.case.value,
                "train_eta": self.eta,
                "eval_slice": eval_slice,
                "eval_case": eval_case,
                "eval_eta": row.eta,
                "loss": row.loss,
                "accuracy": row.accuracy,
                "f1_macro": row.f1_macro,
                "auroc": row.auroc,
                "trainable_params": report.trainable_params,
                "total_params": report.total_params,
            })
        return rows


def census_for(config: ExperimentConfig, variant: Variant) -> tuple[int, int, float]:
    model, bank = build_models(config, variant, seed=0)
    return param_census(model, bank)
