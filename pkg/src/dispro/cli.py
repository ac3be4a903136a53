"""Operational harness: config, subcommands, scenario grids, reports.

Configuration is a flat ``key = value`` text file (documented key list in
DEFAULT_CONFIG below); any key can be overridden by an environment variable
named DISPRO_<KEY> with dots replaced by underscores. Subcommands cover
synthetic-data generation, the two training stages, scenario evaluation,
the full missing-rate grid, and the per-patient attention dump.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import (
    CheckpointError,
    apply_stage1,
    apply_stage2,
    export_stage1,
    export_stage2,
    load_checkpoint,
    save_checkpoint,
)
from .cohort import (
    Cohort,
    CohortError,
    MissingMask,
    Modality,
    Patient,
    PRESET_COMBOS,
    SynthConfig,
    build_missing_mask,
    discretize_cohort,
    generate_synthetic_cohort,
    kfold_split,
    load_manifest,
    save_manifest,
)
from .encoders import EncoderConfig, EncoderError, TextEncoder
from .multipro import (
    FusionError,
    MultiProModel,
    Stage2Result,
    build_multipro,
    train_stage2,
)
from .survival import NoComparablePairsError, concordance_index
from .unipro import Stage1Result, build_unipro, train_stage1

logger = logging.getLogger("dispro.cli")

SCENARIOS = ("pathology-only", "genomics-only", "complete")
_SCENARIO_FLAGS = {"p-only": "pathology-only", "g-only": "genomics-only",
                   "complete": "complete"}

#: Every recognized key with its default, in the config file syntax.
DEFAULT_CONFIG = """\
# data: path to a manifest.jsonl, or empty to use the synthetic cohort
manifest =
out_dir = runs/default

# synthetic cohort
synth.n_patients = 200
synth.bag_size_pathology = 64
synth.bag_size_genomics = 32
synth.d_pathology = 16
synth.d_genomics = 16
synth.informative_fraction = 0.25
synth.signal_strength = 2.0
synth.censor_rate = 0.3
synth.seed = 7

# encoder
encoder.model_dim = 32
encoder.n_layers = 2
encoder.n_heads = 2
encoder.mlp_ratio = 4
encoder.max_seq_len = 512
encoder.layernorm_eps = 1e-5
encoder.vocab_size = 4096
encoder.trainable = true
encoder.embedding_seed = 0

# prompting and pooling
n_intervals = 4
context_length = 8
pool_k = 8
k_pathology = 16
k_genomics = 16

# objective and optimizer
alpha1 = 1.0
alpha2 = 1.0
class_ce_weight = 1.0
lr = 2e-4
weight_decay = 1e-5
epochs_stage1 = 30
epochs_stage2 = 30
use_scoring = true

# training-time missing mask for train-stage1/train-stage2
mask.pathology_rate = 30
mask.genomics_rate = 30

# evaluation grid
folds = 5
combos = 0:60,20:40,30:30,40:20,60:0
seeds = 0,1,2,3,4
"""


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    out_dir: str = "runs/default"
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(trainable_encoder=True))
    embedding_seed: int = 0
    n_intervals: int = 4
    context_length: int = 8
    pool_k: int = 8
    k_pathology: int = 16
    k_genomics: int = 16
    alpha1: float = 1.0
    alpha2: float = 1.0
    class_ce_weight: float = 1.0
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    use_scoring: bool = True
    mask_combo: tuple[float, float] = (30.0, 30.0)
    folds: int = 5
    combos: tuple[tuple[float, float], ...] = PRESET_COMBOS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.n_intervals < 2:
            raise ConfigError("n_intervals must be >= 2")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if min(self.context_length, self.pool_k, self.k_pathology, self.k_genomics) < 1:
            raise ConfigError("context_length, pool_k, k_pathology, k_genomics must be >= 1")
        if 1 + self.k_pathology + self.k_genomics > self.encoder.max_seq_len:
            raise ConfigError(
                f"fusion length 1+{self.k_pathology}+{self.k_genomics} exceeds "
                f"encoder.max_seq_len {self.encoder.max_seq_len}"
            )
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("alpha coefficients must be nonnegative")
        if self.class_ce_weight < 0:
            raise ConfigError("class_ce_weight must be nonnegative")
        p, g = self.mask_combo
        if p < 0 or g < 0 or p + g > 100:
            raise ConfigError(f"mask combo {self.mask_combo} invalid")
        for combo in self.combos:
            if combo[0] < 0 or combo[1] < 0 or combo[0] + combo[1] > 100:
                raise ConfigError(f"grid combo {combo} invalid")


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: cannot parse boolean from {value!r}")


def _parse_combos(value: str, key: str) -> tuple[tuple[float, float], ...]:
    combos = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            p, g = part.split(":")
            combos.append((float(p), float(g)))
        except ValueError as exc:
            raise ConfigError(f"{key}: bad combo {part!r} (want P:G)") from exc
    if not combos:
        raise ConfigError(f"{key}: no combos given")
    return tuple(combos)


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip().lower()] = value.strip()
    return values


def _apply_env_overrides(values: dict[str, str], env: dict[str, str]) -> None:
    """DISPRO_<KEY> (dots become underscores, case-insensitive) wins over files."""
    canonical = {key.replace(".", "_").upper(): key for key in values}
    for name, value in env.items():
        if not name.startswith("DISPRO_"):
            continue
        key = canonical.get(name[len("DISPRO_"):].upper())
        if key is not None:
            values[key] = value


def load_config(
    path: str | Path | None = None, env: dict[str, str] | None = None
) -> RunConfig:
    """Build a validated RunConfig from defaults, file values, and env overrides."""
    values = parse_config_text(DEFAULT_CONFIG)
    if path is not None:
        file_values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        unknown = set(file_values) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(file_values)
    _apply_env_overrides(values, dict(env if env is not None else os.environ))

    def _int(key):
        try:
            return int(values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: not an integer: {values[key]!r}") from exc

    def _float(key):
        try:
            return float(values[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: not a number: {values[key]!r}") from exc

    try:
        synth = SynthConfig(
            n_patients=_int("synth.n_patients"),
            bag_size_pathology=_int("synth.bag_size_pathology"),
            bag_size_genomics=_int("synth.bag_size_genomics"),
            d_pathology=_int("synth.d_pathology"),
            d_genomics=_int("synth.d_genomics"),
            informative_fraction=_float("synth.informative_fraction"),
            signal_strength=_float("synth.signal_strength"),
            censor_rate=_float("synth.censor_rate"),
            seed=_int("synth.seed"),
        )
        encoder = EncoderConfig(
            model_dim=_int("encoder.model_dim"),
            n_layers=_int("encoder.n_layers"),
            n_heads=_int("encoder.n_heads"),
            mlp_ratio=_int("encoder.mlp_ratio"),
            max_seq_len=_int("encoder.max_seq_len"),
            layernorm_eps=_float("encoder.layernorm_eps"),
            vocab_size=_int("encoder.vocab_size"),
            trainable_encoder=_parse_bool(values["encoder.trainable"], "encoder.trainable"),
        )
    except (CohortError, EncoderError) as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        manifest=values["manifest"] or None,
        out_dir=values["out_dir"],
        synth=synth,
        encoder=encoder,
        embedding_seed=_int("encoder.embedding_seed"),
        n_intervals=_int("n_intervals"),
        context_length=_int("context_length"),
        pool_k=_int("pool_k"),
        k_pathology=_int("k_pathology"),
        k_genomics=_int("k_genomics"),
        alpha1=_float("alpha1"),
        alpha2=_float("alpha2"),
        class_ce_weight=_float("class_ce_weight"),
        lr=_float("lr"),
        weight_decay=_float("weight_decay"),
        epochs_stage1=_int("epochs_stage1"),
        epochs_stage2=_int("epochs_stage2"),
        use_scoring=_parse_bool(values["use_scoring"], "use_scoring"),
        mask_combo=(_float("mask.pathology_rate"), _float("mask.genomics_rate")),
        folds=_int("folds"),
        combos=_parse_combos(values["combos"], "combos"),
        seeds=tuple(int(s) for s in values["seeds"].split(",") if s.strip()),
    )


# ---------------------------------------------------------------------------
# Pipeline helpers
# ---------------------------------------------------------------------------


def load_cohort(cfg: RunConfig) -> Cohort:
    if cfg.manifest:
        cohort = load_manifest(cfg.manifest)
    else:
        cohort = generate_synthetic_cohort(cfg.synth)
    return discretize_cohort(cohort, cfg.n_intervals)


def build_encoder(cfg: RunConfig) -> TextEncoder:
    return TextEncoder(cfg.encoder, embedding_seed=cfg.embedding_seed)


def complete_pair_ids(cohort: Cohort) -> list[str]:
    return [
        p.patient_id
        for p in cohort.patients
        if p.pathology is not None and p.genomics is not None
    ]


def training_mask(cohort: Cohort, combo: tuple[float, float], seed: int) -> MissingMask:
    """Missing mask over the complete-pair patients of a training cohort."""
    return build_missing_mask(complete_pair_ids(cohort), combo, seed)


@dataclass
class PipelineResult:
    stage1_p: Stage1Result
    stage1_g: Stage1Result
    stage2: Stage2Result

    @property
    def model(self) -> MultiProModel:
        return self.stage2.model


def train_pipeline(
    cohort: Cohort,
    cfg: RunConfig,
    mask: MissingMask | None,
    seed: int,
    use_scoring: bool | None = None,
    alpha1: float | None = None,
    alpha2: float | None = None,
    encoder: TextEncoder | None = None,
    stage1: tuple[Stage1Result, Stage1Result] | None = None,
) -> PipelineResult:
    """Both stages end to end on an already-discretized training cohort."""
    if encoder is None:
        encoder = build_encoder(cfg)
    if stage1 is None:
        s1p = train_stage1(
            cohort, Modality.PATHOLOGY, encoder, mask=mask,
            context_length=cfg.context_length, pool_k=cfg.pool_k,
            lr=cfg.lr, weight_decay=cfg.weight_decay,
            epochs=cfg.epochs_stage1, seed=seed,
            class_ce_weight=cfg.class_ce_weight,
        )
        s1g = train_stage1(
            cohort, Modality.GENOMICS, encoder, mask=mask,
            context_length=cfg.context_length, pool_k=cfg.pool_k,
            lr=cfg.lr, weight_decay=cfg.weight_decay,
            epochs=cfg.epochs_stage1, seed=seed + 1,
            class_ce_weight=cfg.class_ce_weight,
        )
    else:
        s1p, s1g = stage1
    s2 = train_stage2(
        cohort, mask, s1p, s1g,
        k_pathology=cfg.k_pathology, k_genomics=cfg.k_genomics,
        alpha1=cfg.alpha1 if alpha1 is None else alpha1,
        alpha2=cfg.alpha2 if alpha2 is None else alpha2,
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        epochs=cfg.epochs_stage2, seed=seed + 2,
        use_scoring=cfg.use_scoring if use_scoring is None else use_scoring,
    )
    return PipelineResult(s1p, s1g, s2)


def untrained_pipeline(cohort: Cohort, cfg: RunConfig, seed: int) -> PipelineResult:
    """Same architecture, freshly initialized, zero training steps."""
    encoder = build_encoder(cfg)
    up = build_unipro(
        Modality.PATHOLOGY, cohort.d_pathology, cfg.n_intervals, encoder,
        context_length=cfg.context_length, pool_k=cfg.pool_k, seed=seed,
    )
    ug = build_unipro(
        Modality.GENOMICS, cohort.d_genomics, cfg.n_intervals, encoder,
        context_length=cfg.context_length, pool_k=cfg.pool_k, seed=seed + 1,
    )
    s1p = Stage1Result(up, up.class_representations().detach().clone(), [])
    s1g = Stage1Result(ug, ug.class_representations().detach().clone(), [])
    model = build_multipro(
        s1p, s1g, cfg.k_pathology, cfg.k_genomics, seed=seed + 2
    )
    s2 = Stage2Result(model=model, epoch_losses=[], final_report=None)
    return PipelineResult(s1p, s1g, s2)


def evaluate_scenario(
    model: MultiProModel,
    cohort: Cohort,
    scenario: str,
    use_scoring: bool = True,
    selection_seed: int = 0,
) -> tuple[float | None, int]:
    """C-index of the model on one availability scenario.

    Single-modality scenarios keep only patients carrying that modality;
    the complete scenario feeds every patient whatever they have.
    Returns (cindex or None when no pair is comparable, n_test).
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    select_rng = None if use_scoring else np.random.default_rng(selection_seed)
    risks, labels = [], []
    for patient in cohort.patients:
        bag_p = None if patient.pathology is None else patient.pathology.instances
        bag_g = None if patient.genomics is None else patient.genomics.instances
        if scenario == "pathology-only":
            if bag_p is None:
                continue
            bag_g = None
        elif scenario == "genomics-only":
            if bag_g is None:
                continue
            bag_p = None
        result = model.infer(bag_p, bag_g, use_scoring=use_scoring,
                             select_rng=select_rng)
        risks.append(result.risk)
        labels.append(patient.label)
    if not risks:
        return None, 0
    try:
        return concordance_index(risks, labels), len(risks)
    except NoComparablePairsError:
        return None, len(risks)


# ---------------------------------------------------------------------------
# Attention dump
# ---------------------------------------------------------------------------


def attention_profiles(model: MultiProModel, patient: Patient) -> dict[str, np.ndarray]:
    """Per-position received-attention mass for each availability combo.

    The same patient is fed complete, pathology-only, and genomics-only;
    each vector has length 1 + K_p + K_g (mean over layers, heads, queries
    of the attention each position receives).
    """
    if patient.pathology is None or patient.genomics is None:
        raise FusionError(
            f"patient {patient.patient_id!r} needs both modalities for the dump"
        )
    bag_p, bag_g = patient.pathology.instances, patient.genomics.instances
    return {
        "complete": model.infer(bag_p, bag_g).attention_mass,
        "pathology-only": model.infer(bag_p, None).attention_mass,
        "genomics-only": model.infer(None, bag_g).attention_mass,
    }


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(a @ b / denom) if denom > 0 else 0.0


def missing_vs_complete_cosines(profiles: dict[str, np.ndarray]) -> dict[str, float]:
    ref = profiles["complete"]
    return {name: _cosine(vec, ref) for name, vec in profiles.items()}


def dump_attention(model: MultiProModel, patient: Patient, path: str | Path) -> dict:
    profiles = attention_profiles(model, patient)
    record = {
        "patient": patient.patient_id,
        "length": int(profiles["complete"].shape[0]),
        "mass": {name: vec.tolist() for name, vec in profiles.items()},
        "cosine_vs_complete": missing_vs_complete_cosines(profiles),
    }
    Path(path).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return record


# ---------------------------------------------------------------------------
# Grid evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    records: list[dict]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.records)

    def summary_lines(self) -> list[str]:
        lines = ["combo      scenario          mean-cindex   std     folds"]
        seen: dict[tuple[str, str], list[float]] = {}
        for rec in self.records:
            key = (rec["combo"], rec["scenario"])
            if rec["cindex"] is not None:
                seen.setdefault(key, []).append(rec["cindex"])
        for (combo, scenario), values in seen.items():
            mean = float(np.mean(values))
            std = float(np.std(values))
            lines.append(
                f"{combo:<10} {scenario:<16}  {mean:.4f}       {std:.4f}  {len(values)}"
            )
        return lines


def _combo_label(combo: tuple[float, float]) -> str:
    return f"{combo[0]:g}:{combo[1]:g}"


def run_grid(cfg: RunConfig, cohort: Cohort | None = None) -> MetricsReport:
    """Every missing-rate combo x fold x test scenario, deterministically.

    Splits come from the first configured seed; fold f trains with
    seeds[f mod len(seeds)]. Masks are drawn over the training fold's
    complete-pair patients only; test folds are never masked.
    """
    if cohort is None:
        cohort = load_cohort(cfg)
    splits = kfold_split(cohort, cfg.folds, seed=cfg.seeds[0])
    records = []
    started = time.monotonic()
    for combo in cfg.combos:
        for fold, (train_idx, test_idx) in enumerate(splits):
            seed = cfg.seeds[fold % len(cfg.seeds)]
            train = cohort.subset(train_idx)
            test = cohort.subset(test_idx)
            mask = training_mask(train, combo, seed)
            pipeline = train_pipeline(train, cfg, mask, seed=seed)
            for scenario in SCENARIOS:
                cindex, n_test = evaluate_scenario(
                    pipeline.model, test, scenario,
                    use_scoring=cfg.use_scoring, selection_seed=seed,
                )
                records.append(
                    {
                        "scenario": scenario,
                        "fold": fold,
                        "cindex": None if cindex is None else round(cindex, 10),
                        "n_test": n_test,
                        "seed": seed,
                        "combo": _combo_label(combo),
                    }
                )
            logger.info(
                "grid combo %s fold %d done (%.1fs elapsed)",
                _combo_label(combo), fold, time.monotonic() - started,
            )
    return MetricsReport(records)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _base_seed(cfg: RunConfig, args) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def cmd_gen_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    cohort = generate_synthetic_cohort(cfg.synth)
    manifest = save_manifest(cohort, out)
    print(f"wrote {manifest} ({len(cohort)} patients)")
    return 0


def _stage1_path(out: Path, modality: Modality) -> Path:
    return out / f"stage1_{'p' if modality is Modality.PATHOLOGY else 'g'}.dspr"


def cmd_train_stage1(cfg: RunConfig, args) -> int:
    modality = Modality.PATHOLOGY if args.modality == "p" else Modality.GENOMICS
    cohort = load_cohort(cfg)
    seed = _base_seed(cfg, args)
    mask = training_mask(cohort, cfg.mask_combo, seed)
    encoder = build_encoder(cfg)
    result = train_stage1(
        cohort, modality, encoder, mask=mask,
        context_length=cfg.context_length, pool_k=cfg.pool_k,
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        epochs=cfg.epochs_stage1,
        seed=seed if modality is Modality.PATHOLOGY else seed + 1,
        class_ce_weight=cfg.class_ce_weight,
    )
    out = _out_dir(cfg, args)
    path = _stage1_path(out, modality)
    save_checkpoint(export_stage1(result), path)
    print(
        f"stage-1 {modality.value}: NLL {result.epoch_losses[0]:.4f} -> "
        f"{result.epoch_losses[-1]:.4f}; wrote {path}"
    )
    return 0


def _load_stage1(cfg: RunConfig, cohort: Cohort, out: Path, encoder: TextEncoder,
                 modality: Modality) -> Stage1Result:
    path = _stage1_path(out, modality)
    if not path.exists():
        raise CheckpointError(f"missing stage-1 checkpoint {path}; run train-stage1")
    in_dim = cohort.d_pathology if modality is Modality.PATHOLOGY else cohort.d_genomics
    model = build_unipro(
        modality, in_dim, cfg.n_intervals, encoder,
        context_length=cfg.context_length, pool_k=cfg.pool_k,
    )
    return apply_stage1(model, load_checkpoint(path))


def cmd_train_stage2(cfg: RunConfig, args) -> int:
    cohort = load_cohort(cfg)
    seed = _base_seed(cfg, args)
    out = _out_dir(cfg, args)
    encoder = build_encoder(cfg)
    s1p = _load_stage1(cfg, cohort, out, encoder, Modality.PATHOLOGY)
    s1g = _load_stage1(cfg, cohort, out, encoder, Modality.GENOMICS)
    mask = training_mask(cohort, cfg.mask_combo, seed)
    result = train_stage2(
        cohort, mask, s1p, s1g,
        k_pathology=cfg.k_pathology, k_genomics=cfg.k_genomics,
        alpha1=cfg.alpha1, alpha2=cfg.alpha2,
        lr=cfg.lr, weight_decay=cfg.weight_decay,
        epochs=cfg.epochs_stage2, seed=seed + 2,
        use_scoring=cfg.use_scoring,
    )
    path = out / "stage2.dspr"
    save_checkpoint(export_stage2(result.model), path)
    print(
        f"stage-2: loss {result.epoch_losses[0]:.4f} -> "
        f"{result.epoch_losses[-1]:.4f}; wrote {path}"
    )
    return 0


def _load_stage2_model(cfg: RunConfig, cohort: Cohort, out: Path) -> MultiProModel:
    path = out / "stage2.dspr"
    if not path.exists():
        raise CheckpointError(f"missing stage-2 checkpoint {path}; run train-stage2")
    encoder = build_encoder(cfg)
    up = build_unipro(
        Modality.PATHOLOGY, cohort.d_pathology, cfg.n_intervals, encoder,
        context_length=cfg.context_length, pool_k=cfg.pool_k,
    )
    ug = build_unipro(
        Modality.GENOMICS, cohort.d_genomics, cfg.n_intervals, encoder,
        context_length=cfg.context_length, pool_k=cfg.pool_k,
    )
    s1p = Stage1Result(up, up.class_representations().detach(), [])
    s1g = Stage1Result(ug, ug.class_representations().detach(), [])
    model = build_multipro(s1p, s1g, cfg.k_pathology, cfg.k_genomics)
    return apply_stage2(model, load_checkpoint(path))


def cmd_eval(cfg: RunConfig, args) -> int:
    scenario = _SCENARIO_FLAGS[args.scenario]
    cohort = load_cohort(cfg)
    out = _out_dir(cfg, args)
    model = _load_stage2_model(cfg, cohort, out)
    seed = _base_seed(cfg, args)
    cindex, n_test = evaluate_scenario(
        model, cohort, scenario, use_scoring=cfg.use_scoring, selection_seed=seed
    )
    record = {"scenario": scenario, "fold": None,
              "cindex": cindex, "n_test": n_test, "seed": seed}
    (out / f"eval_{scenario}.json").write_text(json.dumps(record) + "\n")
    shown = "n/a" if cindex is None else f"{cindex:.4f}"
    print(f"{scenario}: C-index {shown} over {n_test} patients")
    return 0


def cmd_dump_attention(cfg: RunConfig, args) -> int:
    cohort = load_cohort(cfg)
    out = _out_dir(cfg, args)
    model = _load_stage2_model(cfg, cohort, out)
    matches = [p for p in cohort.patients if p.patient_id == args.patient]
    if not matches:
        raise CohortError(f"patient {args.patient!r} not in cohort")
    path = out / f"attention_{args.patient}.json"
    record = dump_attention(model, matches[0], path)
    cosines = record["cosine_vs_complete"]
    print(
        f"wrote {path}; cosine vs complete: "
        f"pathology-only {cosines['pathology-only']:.4f}, "
        f"genomics-only {cosines['genomics-only']:.4f}"
    )
    return 0


def cmd_grid(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    started = time.monotonic()
    report = run_grid(cfg)
    elapsed = time.monotonic() - started
    path = out / "metrics.jsonl"
    path.write_text(report.to_jsonl(), encoding="utf-8")
    for line in report.summary_lines():
        print(line)
    print(f"{len(report.records)} records -> {path} ({elapsed:.1f}s wall clock)")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "eval": cmd_eval,
    "dump-attention": cmd_dump_attention,
    "grid": cmd_grid,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dispro",
        description="Two-stage prompt learning for survival prediction "
        "under missing modalities",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="base seed (overrides seeds[0])")

    common(sub.add_parser("gen-synth", help="write a synthetic cohort manifest"))
    p1 = sub.add_parser("train-stage1", help="train one modality's prompts")
    common(p1)
    p1.add_argument("--modality", choices=("p", "g"), required=True)
    common(sub.add_parser("train-stage2", help="train the fusion stage"))
    pe = sub.add_parser("eval", help="C-index on one availability scenario")
    common(pe)
    pe.add_argument("--scenario", choices=tuple(_SCENARIO_FLAGS), required=True)
    pd = sub.add_parser("dump-attention", help="attention profile for one patient")
    common(pd)
    pd.add_argument("--patient", required=True)
    common(sub.add_parser("grid", help="full combos x folds x scenarios protocol"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, CohortError, EncoderError, FusionError,
            CheckpointError, NoComparablePairsError, OSError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
