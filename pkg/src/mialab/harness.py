"""End-to-end membership-inference experiments and summary reports.

One repeat = split the pool, train a target and a shadow model under the
configured defense, calibrate each attack on the shadow model's own
members/non-members, then score the attacks on the target's balanced
attack-eval set. Repeats are aggregated as mean and sample std.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attack import (
    ATTACK_NAMES,
    AttackReport,
    LabelOnlyConfig,
    calibrate_consistency_threshold,
    calibrate_threshold,
    collect_confidences,
    consistency_scores,
    evaluate_attack,
    threshold_attack_many,
    train_attack_classifier,
)
from .data import BlobSpec, Dataset, SplitPlan, SplitSizes, load_csv, load_mnist_idx, make_blobs, make_split
from .defense import (
    DefenseConfig,
    NoDefense,
    defense_from_dict,
    defense_label,
    defense_to_dict,
)
from .errors import ContractError, ExperimentError, MiaLabError
from .training import TrainStreams, accuracy, build_model, train_model

log = logging.getLogger(__name__)

# Desk-scale synthetic default: high-dimensional,
# overlapping classes so a 1000-example MLP memorizes its training set.
DEFAULT_BLOBS = {
    "kind": "blobs",
    "num_classes": 10,
    "points_per_class": 400,
    "dimension": 500,
    "separation": 4.0,
    "spread": 1.0,
    "seed": 0,
}
DEFAULT_HIDDEN = (256, 128)
MNIST_EPOCHS = 50
DEFAULT_EPOCHS = 100


def _strict(cls, obj: dict, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ContractError(f"{where} must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ContractError(f"unknown keys in {where}: {unknown}")
    return obj


def _dataset_from_dict(spec: dict) -> dict:
    spec = dict(spec)
    kind = spec.get("kind")
    if kind == "blobs":
        allowed = set(DEFAULT_BLOBS)
        merged = {**DEFAULT_BLOBS, **spec}
    elif kind == "mnist":
        allowed = {"kind", "images", "labels", "test_images", "test_labels"}
        merged = {"test_images": None, "test_labels": None, **spec}
        if "images" not in spec or "labels" not in spec:
            raise ContractError("mnist dataset needs 'images' and 'labels' paths")
    elif kind == "csv":
        allowed = {"kind", "path", "num_classes"}
        merged = {"num_classes": None, **spec}
        if "path" not in spec:
            raise ContractError("csv dataset needs a 'path'")
    else:
        raise ContractError(f"dataset kind must be 'blobs', 'mnist' or 'csv', got {kind!r}")
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ContractError(f"unknown keys in dataset: {unknown}")
    if kind == "blobs":
        BlobSpec(**{k: v for k, v in merged.items() if k != "kind"})
    return merged


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_BLOBS))
    split: SplitSizes = field(default_factory=SplitSizes)
    hidden_sizes: list[int] = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    defense: DefenseConfig = field(default_factory=NoDefense)
    attacks: list[str] = field(default_factory=lambda: list(ATTACK_NAMES))
    epochs: int | None = None
    batch_size: int = 128
    learning_rate: float = 1e-3
    repeats: int = 5
    seed: int = 0
    label_only: LabelOnlyConfig = field(default_factory=LabelOnlyConfig)
    threshold_mode: str = "global"
    # "same": shadow trained with the target's defense; "none": undefended shadow
    shadow_defense: str = "same"

    def __post_init__(self):
        self.dataset = _dataset_from_dict(self.dataset)
        if self.epochs is None:
            self.epochs = MNIST_EPOCHS if self.dataset["kind"] == "mnist" else DEFAULT_EPOCHS
        if self.repeats < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ContractError("repeats, epochs and batch_size must all be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if any(h < 1 for h in self.hidden_sizes):
            raise ContractError("hidden layer sizes must be positive")
        bad = [a for a in self.attacks if a not in ATTACK_NAMES]
        if bad or len(set(self.attacks)) != len(self.attacks):
            raise ContractError(f"attacks must be distinct names from {ATTACK_NAMES}, got {self.attacks}")
        self.attacks = [a for a in ATTACK_NAMES if a in self.attacks]
        if self.threshold_mode not in ("global", "per-class"):
            raise ContractError(f"threshold_mode must be 'global' or 'per-class', got {self.threshold_mode!r}")
        if self.shadow_defense not in ("same", "none"):
            raise ContractError(f"shadow_defense must be 'same' or 'none', got {self.shadow_defense!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(_strict(cls, obj, "config"))
        if "split" in obj:
            obj["split"] = SplitSizes(**_strict(SplitSizes, obj["split"], "split"))
        if "label_only" in obj:
            obj["label_only"] = LabelOnlyConfig(**_strict(LabelOnlyConfig, obj["label_only"], "label_only"))
        if "defense" in obj:
            obj["defense"] = defense_from_dict(obj["defense"])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ContractError(f"bad config: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset),
            "split": asdict(self.split),
            "hidden_sizes": list(self.hidden_sizes),
            "defense": defense_to_dict(self.defense),
            "attacks": list(self.attacks),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "repeats": self.repeats,
            "seed": self.seed,
            "label_only": asdict(self.label_only),
            "threshold_mode": self.threshold_mode,
            "shadow_defense": self.shadow_defense,
        }


def load_dataset(spec: dict) -> Dataset:
    kind = spec["kind"]
    if kind == "blobs":
        return make_blobs(BlobSpec(**{k: v for k, v in spec.items() if k != "kind"}))
    if kind == "csv":
        return load_csv(spec["path"], num_classes=spec.get("num_classes"))
    ds = load_mnist_idx(spec["images"], spec["labels"])
    if spec.get("test_images"):
        extra = load_mnist_idx(spec["test_images"], spec["test_labels"])
        ds = Dataset(
            np.vstack([ds.features, extra.features]),
            np.concatenate([ds.labels, extra.labels]),
            10,
            name="mnist",
        )
    return ds


# --- one repeat ----------------------------------------------------------------


@dataclass
class RepeatResult:
    repeat: int
    classification_accuracy: float
    train_accuracy: float
    attacks: dict[str, AttackReport]
    thresholds: dict[str, float | list[float]]
    plan: SplitPlan | None = None

    def to_dict(self) -> dict:
        return {
            "repeat": self.repeat,
            "classification_accuracy": self.classification_accuracy,
            "train_accuracy": self.train_accuracy,
            "attacks": {k: v.to_dict() for k, v in self.attacks.items()},
            "thresholds": self.thresholds,
        }


def repeat_seed(master_seed: int, repeat: int) -> np.random.SeedSequence:
    # hashed from (master, repeat) so adding repeats never shifts earlier ones
    return np.random.SeedSequence([int(master_seed), int(repeat)])


def _train(config: ExperimentConfig, dataset: Dataset, indices, defense, seed) -> nx.MlpModel:
    init_seed, stream_seed = seed.spawn(2)
    sizes = [dataset.dim, *config.hidden_sizes, dataset.num_classes]
    model = build_model(sizes, defense, np.random.default_rng(init_seed))
    x, y = dataset.subset(indices)
    train_model(
        model,
        x,
        y,
        defense,
        config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        streams=TrainStreams.from_seed(stream_seed),
    )
    return model


def run_attacks(
    target: nx.MlpModel,
    shadow: nx.MlpModel,
    dataset: Dataset,
    plan: SplitPlan,
    config: ExperimentConfig,
    seed: np.random.SeedSequence,
) -> tuple[dict[str, AttackReport], dict]:
    """Calibrate on shadow train/test, evaluate on the target's attack-eval sets."""
    reports, thresholds = {}, {}
    if not config.attacks:
        return reports, thresholds
    clf_seed, noise_seed = seed.spawn(2)
    eval_idx = np.concatenate([plan.attack_eval_members, plan.attack_eval_nonmembers])
    truth = np.concatenate(
        [np.ones(len(plan.attack_eval_members)), np.zeros(len(plan.attack_eval_nonmembers))]
    )

    if "A1" in config.attacks or "A2" in config.attacks:
        shadow_in = collect_confidences(shadow, dataset, plan.shadow_train)
        shadow_out = collect_confidences(shadow, dataset, plan.shadow_test)
        target_eval = collect_confidences(target, dataset, eval_idx)
    if "A1" in config.attacks:
        clf = train_attack_classifier(shadow_in, shadow_out, np.random.default_rng(clf_seed))
        reports["A1"] = evaluate_attack(clf.predict(target_eval), truth, "A1")
    if "A2" in config.attacks:
        rule = calibrate_threshold(shadow_in, shadow_out, config.threshold_mode)
        reports["A2"] = evaluate_attack(threshold_attack_many(target_eval, rule), truth, "A2")
        thresholds["A2"] = np.asarray(rule.tau).tolist()
    if "A3" in config.attacks:
        rng = np.random.default_rng(noise_seed)
        lo = config.label_only
        p_in = consistency_scores(shadow, *dataset.subset(plan.shadow_train), lo, rng)
        p_out = consistency_scores(shadow, *dataset.subset(plan.shadow_test), lo, rng)
        tau_p = lo.consistency_threshold
        if tau_p is None:
            tau_p = calibrate_consistency_threshold(p_in, p_out)
        p_eval = consistency_scores(target, *dataset.subset(eval_idx), lo, rng)
        reports["A3"] = evaluate_attack((p_eval >= tau_p).astype(np.int64), truth, "A3")
        thresholds["A3"] = float(tau_p)
    return reports, thresholds


def _repeat_seeds(config: ExperimentConfig, repeat: int) -> dict[str, np.random.SeedSequence]:
    split, target, shadow, attack = repeat_seed(config.seed, repeat).spawn(4)
    return {"split": split, "target": target, "shadow": shadow, "attack": attack}


def plan_for(config: ExperimentConfig, dataset: Dataset, repeat: int = 0) -> SplitPlan:
    return make_split(dataset, config.split, _repeat_seeds(config, repeat)["split"])


def train_target(config: ExperimentConfig, dataset: Dataset, repeat: int = 0):
    """The target model and split exactly as repeat ``repeat`` of an experiment builds them."""
    seeds = _repeat_seeds(config, repeat)
    plan = make_split(dataset, config.split, seeds["split"])
    return _train(config, dataset, plan.target_train, config.defense, seeds["target"]), plan


def train_shadow(config: ExperimentConfig, dataset: Dataset, plan: SplitPlan, repeat: int = 0):
    shadow_def = config.defense if config.shadow_defense == "same" else NoDefense()
    seed = _repeat_seeds(config, repeat)["shadow"]
    return _train(config, dataset, plan.shadow_train, shadow_def, seed)


def attack_seed(config: ExperimentConfig, repeat: int = 0) -> np.random.SeedSequence:
    return _repeat_seeds(config, repeat)["attack"]


def run_repeat(config: ExperimentConfig, dataset: Dataset, repeat: int) -> RepeatResult:
    seeds = _repeat_seeds(config, repeat)
    stage = "split"
    try:
        plan = make_split(dataset, config.split, seeds["split"])
        stage = "train-target"
        target = _train(config, dataset, plan.target_train, config.defense, seeds["target"])
        stage = "train-shadow"
        shadow = train_shadow(config, dataset, plan, repeat)
        stage = "attack"
        reports, thresholds = run_attacks(target, shadow, dataset, plan, config, seeds["attack"])
        stage = "evaluate"
        test_acc = accuracy(target, *dataset.subset(plan.target_test))
        train_acc = accuracy(target, *dataset.subset(plan.target_train))
    except MiaLabError as exc:
        raise ExperimentError(str(exc), repeat=repeat, stage=stage) from exc
    return RepeatResult(repeat, test_acc, train_acc, reports, thresholds, plan)


# --- aggregation and reports ---------------------------------------------------


@dataclass
class Summary:
    mean: float
    std: float | None
    n: int

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.asarray(values, dtype=np.float64)
        std = float(np.std(v, ddof=1)) if v.size > 1 else None
        return cls(float(v.mean()), std, int(v.size))


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    repeats: list[RepeatResult]
    wall_clock_seconds: float = 0.0

    @property
    def defense_name(self) -> str:
        return defense_label(self.config.defense)

    @property
    def classification(self) -> Summary:
        return Summary.of([r.classification_accuracy for r in self.repeats])

    def attack(self, name: str) -> Summary:
        return Summary.of([r.attacks[name].accuracy for r in self.repeats])

    def to_dict(self) -> dict:
        cls = self.classification
        return {
            "defense": self.defense_name,
            "config": self.config.to_dict(),
            "wall_clock_seconds": self.wall_clock_seconds,
            "classification_accuracy": asdict(cls),
            "attack_accuracy": {a: asdict(self.attack(a)) for a in self.config.attacks},
            "per_repeat": [r.to_dict() for r in self.repeats],
        }


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentReport:
    start = time.perf_counter()
    if dataset is None:
        try:
            dataset = load_dataset(config.dataset)
        except MiaLabError as exc:
            raise ExperimentError(str(exc), stage="load-dataset") from exc
    results = []
    for r in range(config.repeats):
        log.info("repeat %d/%d (%s)", r + 1, config.repeats, defense_label(config.defense))
        results.append(run_repeat(config, dataset, r))
    return ExperimentReport(config, results, time.perf_counter() - start)


@dataclass
class ComparisonTable:
    reports: list[ExperimentReport]

    @property
    def attacks(self) -> list[str]:
        return [a for a in ATTACK_NAMES if all(a in r.config.attacks for r in self.reports)]


def run_comparison(configs, dataset: Dataset | None = None) -> ComparisonTable:
    """Run each config in order; all configs must share one dataset spec."""
    configs = list(configs)
    if not configs:
        raise ContractError("comparison needs at least one config")
    first = configs[0].dataset
    for c in configs[1:]:
        if c.dataset != first:
            raise ContractError("all configs in a comparison must use the same dataset")
    if dataset is None:
        try:
            dataset = load_dataset(first)
        except MiaLabError as exc:
            raise ExperimentError(str(exc), stage="load-dataset") from exc
    return ComparisonTable([run_experiment(c, dataset) for c in configs])


def _as_table(report) -> ComparisonTable:
    return report if isinstance(report, ComparisonTable) else ComparisonTable([report])


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"


def report_rows(report) -> tuple[list[str], list[list[str]]]:
    table = _as_table(report)
    header = ["defense", "repeats", "classification_accuracy_mean", "classification_accuracy_std"]
    for a in table.attacks:
        header += [f"{a}_accuracy_mean", f"{a}_accuracy_std"]
    rows = []
    for rep in table.reports:
        cls = rep.classification
        row = [rep.defense_name, str(cls.n), _fmt(cls.mean), _fmt(cls.std)]
        for a in table.attacks:
            s = rep.attack(a)
            row += [_fmt(s.mean), _fmt(s.std)]
        rows.append(row)
    return header, rows


def render_csv(report) -> str:
    header, rows = report_rows(report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _pct(s: Summary) -> str:
    if s.std is None:
        return f"{100 * s.mean:.2f}"
    return f"{100 * s.mean:.2f} ± {100 * s.std:.2f}"


def render_markdown(report) -> str:
    """Metrics as row groups, defenses as columns, values in percent."""
    table = _as_table(report)
    names = [r.defense_name for r in table.reports]
    lines = [
        "| Metric | " + " | ".join(names) + " |",
        "|---|" + "---|" * len(names),
        "| Classification accuracy | " + " | ".join(_pct(r.classification) for r in table.reports) + " |",
    ]
    for a in table.attacks:
        lines.append(f"| {a} attack accuracy | " + " | ".join(_pct(r.attack(a)) for r in table.reports) + " |")
    return "\n".join(lines) + "\n"


def render_json(report) -> str:
    table = _as_table(report)
    if isinstance(report, ComparisonTable):
        obj = {"comparison": [r.to_dict() for r in table.reports]}
    else:
        obj = report.to_dict()
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


RENDERERS = {"csv": render_csv, "md": render_markdown, "markdown": render_markdown, "json": render_json}


def emit_report(report, fmt: str = "csv", destination=None) -> str:
    """Render ``report`` and write it to ``destination`` (path, file object, or stdout)."""
    try:
        render = RENDERERS[fmt]
    except KeyError:
        raise ContractError(f"unknown report format {fmt!r}; expected csv, md or json") from None
    text = render(report)
    if destination is None or destination == "-":
        sys.stdout.write(text)
    elif hasattr(destination, "write"):
        destination.write(text)
    else:
        path = Path(destination)
        try:
            with open(path, "w", newline="") as f:
                f.write(text)
        except OSError as exc:
            raise OSError(f"cannot write report to {path}: {exc.strerror}") from exc
    return text


def parse_csv_report(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))
