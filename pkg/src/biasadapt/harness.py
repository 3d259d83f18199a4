"""Config-driven experiment harness: dataset synthesis or CSV ingestion,
training runs with trace/checkpoint/metrics artifacts, checkpoint scoring,
the overhead micro-benchmark, and cross-run comparison tables.

The master seed fans out via SeedSequence children: child 0 drives data
synthesis, child 1 seeds the trainer (which spawns its own init / batch /
augmentation streams). Evaluation consumes no randomness, so changing the
evaluation cadence never perturbs training.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .bilevel import (
    LowerOptimizer,
    TrainConfig,
    _hypergrad_unrolled,
    _lower_backward,
    _lower_forward,
    _theta_phi_arrays,
    lower_loss,
    lower_step,
    train,
    upper_loss,
    write_trace_csv,
)
from .data import (
    Dataset,
    ImbalanceProfile,
    class_counts,
    load_csv_dataset,
    one_hot,
    save_csv_dataset,
    split_counts,
    synth_gaussian_mixture,
)
from .metrics import MetricsReport, evaluate, pseudo_label_recall, save_confusion_csv
from .model import (
    classifier_scores,
    forward_features,
    forward_train,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .numcore import child_seeds, make_rng
from .pseudo import PseudoBatch, assign_pseudo_labels

OUT_ROOT_ENV = "BIASADAPT_OUT"


@dataclass
class ProfileSpec:
    kind: str = "longtail"
    gamma: float = 20.0
    n1: int = 100

    def to_profile(self, num_classes: int) -> ImbalanceProfile:
        return ImbalanceProfile(self.kind, self.gamma, self.n1, num_classes)


@dataclass
class DataConfig:
    dim: int = 16
    num_classes: int = 6
    class_separation: float = 3.0
    labeled_profile: ProfileSpec = field(default_factory=ProfileSpec)
    unlabeled_profile: ProfileSpec = field(
        default_factory=lambda: ProfileSpec(kind="longtail", gamma=20.0, n1=500)
    )
    test_per_class: int = 250
    labeled_csv: str | None = None
    unlabeled_csv: str | None = None
    test_csv: str | None = None


@dataclass
class EvalConfig:
    interval: int = 100
    last_e: int = 20
    ckpt_interval: int = 0
    out_dir: str = "runs/run"


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _from_dict(cls, payload: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ValueError(f"unknown config key(s) {sorted(unknown)} under {path or 'top level'}")
    kwargs = {}
    for name, value in payload.items():
        sub = f"{path}.{name}" if path else name
        if isinstance(value, dict):
            sub_cls = {
                "data": DataConfig,
                "train": TrainConfig,
                "eval": EvalConfig,
                "labeled_profile": ProfileSpec,
                "unlabeled_profile": ProfileSpec,
            }.get(name)
            if sub_cls is None:
                raise ValueError(f"unexpected mapping at {sub}")
            kwargs[name] = _from_dict(sub_cls, value, sub)
        elif name == "extractor_hidden":
            kwargs[name] = tuple(int(v) for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_to_dict(config: ExperimentConfig) -> dict:
    out = dataclasses.asdict(config)
    out["train"]["extractor_hidden"] = list(config.train.extractor_hidden)
    return out


def config_from_dict(payload: dict) -> ExperimentConfig:
    config = _from_dict(ExperimentConfig, payload, "")
    config.train.validate()
    return config


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        payload = yaml.safe_load(fh)
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return config_from_dict(payload)


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=True)


def resolve_out_dir(out_dir: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(out_dir)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


# ---------------------------------------------------------------------------
# dataset assembly


def build_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset | None, Dataset]:
    """(labeled, unlabeled, test) from CSVs when given, otherwise synthesized
    from one mixture pool using the data child stream of the master seed."""
    dc = config.data
    if dc.labeled_csv:
        d_l = load_csv_dataset(dc.labeled_csv)
        d_u = load_csv_dataset(dc.unlabeled_csv) if dc.unlabeled_csv else None
        if not dc.test_csv:
            raise ValueError("test_csv required when training from CSVs")
        d_test = load_csv_dataset(dc.test_csv)
        return d_l, d_u, d_test
    data_seed = child_seeds(config.seed, 2)[0]
    rng = make_rng(data_seed)
    labeled = class_counts(dc.labeled_profile.to_profile(dc.num_classes))
    unlabeled = class_counts(dc.unlabeled_profile.to_profile(dc.num_classes))
    test = np.full(dc.num_classes, dc.test_per_class, dtype=np.int64)
    pool = synth_gaussian_mixture(
        dc.num_classes, dc.dim, dc.class_separation, labeled + unlabeled + test, rng
    )
    d_l, d_u, d_test = split_counts(pool, [labeled, unlabeled, test], [True, False, True], rng)
    return d_l, d_u, d_test


# ---------------------------------------------------------------------------
# training run with artifacts


def final_pseudo_recall(config: TrainConfig, state, d_u: Dataset | None):
    """Diagnostic: pseudo-label recall of the final model over the unlabeled
    set (raw features as the weak view), using the mode's labeling path."""
    if d_u is None or len(d_u) == 0:
        return None
    if config.mode == "baseline" or config.pseudo_source == "plain":
        z = forward_features(d_u.features, state.theta)
        logits = classifier_scores(z, state.phi_w, state.phi_b)
    else:
        logits, _ = forward_train(d_u.features, state, config.attractor_norm)
    y_hat, lam = assign_pseudo_labels(
        logits, config.tau, config.lambda_u, config.pseudo_mode, config.sharpen_temperature
    )
    return pseudo_label_recall(d_u.true_labels, y_hat, lam)


def run_train(config: ExperimentConfig, force: bool = False) -> dict:
    out_dir = resolve_out_dir(config.eval.out_dir)
    metrics_path = out_dir / "metrics.json"
    if metrics_path.exists() and not force:
        raise FileExistsError(f"{metrics_path} exists; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    # master seed child 0 drives data synthesis (build_datasets); child 1
    # seeds the trainer so the two never share a stream
    config.train.seed = child_seeds(config.seed, 2)[1]
    d_l, d_u, d_test = build_datasets(config)
    reports: list[tuple[int, MetricsReport]] = []

    def hook(iteration, state):
        reports.append((iteration, evaluate(state, d_test, use_ema=True)))
        if config.eval.ckpt_interval > 0 and iteration % config.eval.ckpt_interval == 0:
            save_checkpoint(
                out_dir / f"ckpt_{iteration:07d}.npz", state, config.train.attractor_norm
            )

    state, traces = train(
        config.train, d_l, d_u, eval_hook=hook, eval_interval=config.eval.interval
    )

    tail = [r for _, r in reports][-config.eval.last_e :] if reports else []
    final_report = evaluate(state, d_test, use_ema=True)
    final_report.pseudo_recall = final_pseudo_recall(config.train, state, d_u)

    headline = None
    if tail:
        headline = {
            "bacc": float(np.mean([r.bacc for r in tail])),
            "gm": float(np.mean([r.gm for r in tail])),
            "acc": float(np.mean([r.acc for r in tail])),
            "min_recall": float(np.mean([min(r.per_class_recall) for r in tail])),
            "evals_averaged": len(tail),
        }

    payload = {
        "mode": config.train.mode,
        "seed": config.seed,
        "iters": config.train.iters,
        "headline": headline,
        "final": final_report.to_dict(),
        "history": [
            {"iter": it, "bacc": r.bacc, "gm": r.gm, "acc": r.acc}
            for it, r in reports
        ],
    }

    write_trace_csv(traces, out_dir / "trace.csv", include_timings=config.train.log_timings)
    save_checkpoint(out_dir / "ckpt_final.npz", state, config.train.attractor_norm)
    save_config(config, out_dir / "config.yaml")
    save_confusion_csv(np.array(final_report.confusion), out_dir / "confusion.csv")
    with open(metrics_path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return payload


def run_eval(ckpt_path, test_csv, use_ema: bool = True) -> MetricsReport:
    state, _norm = load_checkpoint(ckpt_path)
    test = load_csv_dataset(test_csv)
    return evaluate(state, test, use_ema=use_ema)


def run_gen_data(
    profile: ImbalanceProfile,
    dim: int,
    class_separation: float,
    seed: int,
    out_dir,
    force: bool = False,
) -> dict:
    """Synthesize one fully labeled dataset following the profile and write
    data.csv plus a counts summary."""
    out = resolve_out_dir(str(out_dir))
    target = out / "data.csv"
    if target.exists() and not force:
        raise FileExistsError(f"{target} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    counts = class_counts(profile)
    ds = synth_gaussian_mixture(
        profile.num_classes, dim, class_separation, counts, make_rng(seed)
    )
    save_csv_dataset(ds, target)
    summary = {
        "counts": [int(c) for c in counts],
        "rows": len(ds),
        "path": str(target),
    }
    with open(out / "counts.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------------------
# overhead micro-benchmark


def bench_overhead(config: ExperimentConfig, reps: int = 30) -> dict:
    """Median wall-clock of the backward-on-backward head step vs one full
    lower backward pass at the configured sizes, plus the parameter-count
    ratio that motivates the head-only unroll."""
    tc = config.train
    rng = make_rng(config.seed)
    k = config.data.num_classes
    dims = [config.data.dim, *tc.extractor_hidden, tc.feature_dim]
    state = init_model(dims, k, tc.attractor_hidden, rng)
    state.omega_w2 += 0.1 * rng.standard_normal(state.omega_w2.shape)

    x_l = rng.standard_normal((tc.batch_n, config.data.dim))
    y_l = one_hot(rng.integers(0, k, tc.batch_n), k)
    x_u = rng.standard_normal((tc.batch_m, config.data.dim))
    y_hat = one_hot(rng.integers(0, k, tc.batch_m), k)
    pseudo = PseudoBatch(x_u, x_u, y_hat, np.ones(tc.batch_m))
    bal_n = tc.balanced_n - tc.balanced_n % k
    bal_x = rng.standard_normal((max(bal_n, k), config.data.dim))
    bal_y = one_hot(np.arange(max(bal_n, k)) % k, k)

    _, internals = _lower_forward(x_l, y_l, pseudo, state, tc.attractor_norm)
    backward_times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        _lower_backward(state, internals)
        backward_times.append(time.perf_counter() - t0)

    work_state = state
    res = lower_loss(x_l, y_l, pseudo, work_state, tc.attractor_norm)
    opt = LowerOptimizer("sgd", _theta_phi_arrays(work_state))
    cache = lower_step(work_state, res, tc.alpha, opt)
    _, upper_grad, _ = upper_loss(bal_x, bal_y, work_state)
    second_times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        _hypergrad_unrolled(work_state, cache, upper_grad)
        second_times.append(time.perf_counter() - t0)

    t_back = statistics.median(backward_times)
    t_second = statistics.median(second_times)
    phi_params = state.phi_w.size + state.phi_b.size
    total_params = (
        sum(w.size + b.size for w, b in state.theta)
        + phi_params
        + sum(a.size for a in state.omega_arrays())
    )
    return {
        "backward_seconds": t_back,
        "second_order_seconds": t_second,
        "ratio": t_second / t_back if t_back > 0 else math.inf,
        "phi_params": int(phi_params),
        "total_params": int(total_params),
        "params_ratio": phi_params / total_params,
        "reps": reps,
    }


# ---------------------------------------------------------------------------
# compare


def run_compare(run_dirs) -> tuple[str, str]:
    """Aggregate completed runs per mode into mean +/- std of headline bACC
    and GM. Returns (aligned text table, CSV text)."""
    rows = []
    for d in run_dirs:
        path = resolve_out_dir(str(d)) / "metrics.json"
        if not path.exists():
            raise FileNotFoundError(f"no metrics.json in run {d}")
        with open(path) as fh:
            payload = json.load(fh)
        headline = payload.get("headline") or {
            "bacc": payload["final"]["bacc"],
            "gm": payload["final"]["gm"],
        }
        rows.append((payload["mode"], float(headline["bacc"]), float(headline["gm"])))
    by_mode: dict[str, list[tuple[float, float]]] = {}
    for mode, bacc, gm in rows:
        by_mode.setdefault(mode, []).append((bacc, gm))

    def mean_std(vals):
        if len(vals) == 1:
            return vals[0], 0.0
        return statistics.fmean(vals), statistics.stdev(vals)

    text_lines = [f"{'mode':<16s} {'runs':>4s} {'bACC':>16s} {'GM':>16s}"]
    csv_lines = ["mode,runs,bacc_mean,bacc_std,gm_mean,gm_std"]
    for mode in sorted(by_mode):
        baccs = [b for b, _ in by_mode[mode]]
        gms = [g for _, g in by_mode[mode]]
        bm, bs = mean_std(baccs)
        gm_m, gm_s = mean_std(gms)
        text_lines.append(
            f"{mode:<16s} {len(baccs):>4d} {bm:8.4f}±{bs:<7.4f} {gm_m:8.4f}±{gm_s:<7.4f}"
        )
        csv_lines.append(f"{mode},{len(baccs)},{bm!r},{bs!r},{gm_m!r},{gm_s!r}")
    return "\n".join(text_lines), "\n".join(csv_lines) + "\n"
