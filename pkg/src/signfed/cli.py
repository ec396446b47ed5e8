"""Experiment runner: config parsing, seeded runs, metrics CSV, presets."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .adversary import ADVERSARY_KINDS, AdversaryConfig
from .data import Dataset, PartitionSpec, partition_by_labels, synthetic_dataset, load_mnist_idx
from .federation import (
    ALGORITHMS,
    TAG_INIT,
    TAG_PARTITION,
    Party,
    ServerState,
    run_round,
    substream,
)
from .model import flatten_params, init_mlp
from .privacy import PrivacyParams

DATA_DIR_ENV = "SIGNFED_DATA_DIR"

MNIST_TRAIN_IMAGES = "train-images-idx3-ubyte"
MNIST_TRAIN_LABELS = "train-labels-idx1-ubyte"
MNIST_TEST_IMAGES = "t10k-images-idx3-ubyte"
MNIST_TEST_LABELS = "t10k-labels-idx1-ubyte"

PRESET_NAMES = ("table1", "byzantine")
PRESET_SEEDS = 3
TABLE1_EPSILONS = (0.05, 0.1, 0.5, 1.0, 2.0)
BYZANTINE_FRACTIONS = (0.0, 0.2, 0.4)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Full provenance of one run; every field is echoed into the CSV header."""

    algorithm: str = "dp-signsgd"
    dataset: str = "mnist"
    data_dir: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    synth_input_dim: int = 784
    synth_classes: int = 10
    synth_train: int = 2000
    synth_test: int = 1000
    synth_separation: float = 6.0
    synth_seed: int = 1234
    parties: int = 31
    labels_per_party: int = 4
    byzantine_kind: str = "negative"
    byzantine_frac: float = 0.0
    epsilon: float = 1.0
    delta: float = 1e-5
    clip_bound: float = 4.0
    sensitivity_mode: str = "clip"
    batch_size: int = 256
    eta: float = 0.005
    error_decay: float = 0.5
    residual_scale: str = "1/m"
    hidden_units: int = 64
    rounds: int = 300
    seed: int = 0


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    c = config
    if c.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {c.algorithm!r}; choose from {ALGORITHMS}")
    if c.dataset not in ("mnist", "synthetic"):
        raise ConfigError(f"dataset must be 'mnist' or 'synthetic', got {c.dataset!r}")
    if not c.epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {c.epsilon!r}")
    if not 0 < c.delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {c.delta!r}")
    if not c.clip_bound > 0:
        raise ConfigError(f"clip bound must be positive, got {c.clip_bound!r}")
    if c.sensitivity_mode not in ("clip", "clip-over-batch"):
        raise ConfigError(f"sensitivity_mode must be 'clip' or 'clip-over-batch'")
    if c.residual_scale not in ("1/m", "1"):
        raise ConfigError(f"residual_scale must be '1/m' or '1', got {c.residual_scale!r}")
    if c.byzantine_kind not in ADVERSARY_KINDS:
        raise ConfigError(f"byzantine kind must be one of {ADVERSARY_KINDS}")
    if not 0.0 <= c.byzantine_frac < 1.0:
        raise ConfigError(f"byzantine fraction must lie in [0, 1), got {c.byzantine_frac!r}")
    if c.algorithm == "fedavg" and c.byzantine_frac > 0:
        raise ConfigError("byzantine adversaries are only modelled for sign-based algorithms")
    if c.parties < 1 or c.labels_per_party < 1:
        raise ConfigError("need at least one party and one label per party")
    if c.batch_size < 1 or c.rounds < 1 or c.hidden_units < 1:
        raise ConfigError("batch_size, rounds and hidden_units must all be >= 1")
    if c.eta < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {c.eta!r}")
    if not 0.0 <= c.error_decay <= 1.0:
        raise ConfigError(f"error decay must lie in [0, 1], got {c.error_decay!r}")
    if c.seed < 0 or c.synth_seed < 0:
        raise ConfigError("seeds must be nonnegative")
    for name in ("train_limit", "test_limit"):
        value = getattr(c, name)
        if value is not None and value < 1:
            raise ConfigError(f"{name} must be >= 1 when set")
    if c.dataset == "synthetic":
        if c.synth_train < c.synth_classes or c.synth_test < 1:
            raise ConfigError("synthetic split sizes are too small")
        if c.labels_per_party > c.synth_classes:
            raise ConfigError(
                f"labels_per_party={c.labels_per_party} exceeds {c.synth_classes} classes"
            )
    return c


def byzantine_count(config: ExperimentConfig) -> int:
    """Attackers to add so they make up byzantine_frac of all participants."""
    frac = config.byzantine_frac
    if frac == 0.0:
        return 0
    return int(round(frac * config.parties / (1.0 - frac)))


def _mnist_file(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise ConfigError(f"missing dataset file {stem}[.gz] under {data_dir}")


def resolve_dataset(config: ExperimentConfig) -> tuple[Dataset, Dataset, str]:
    """Load or generate the (train, test) pair; returns the source tag too."""
    if config.dataset == "synthetic":
        total = synthetic_dataset(
            config.synth_input_dim, config.synth_classes,
            config.synth_train + config.synth_test,
            config.synth_separation, config.synth_seed,
        )
        train = total.subset(np.arange(config.synth_train))
        test = total.subset(np.arange(config.synth_train, len(total)))
        return train, test, "synthetic"

    data_dir = config.data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise ConfigError(
            f"dataset 'mnist' needs --data-dir or the {DATA_DIR_ENV} environment variable"
        )
    data_dir = Path(data_dir)
    train = load_mnist_idx(_mnist_file(data_dir, MNIST_TRAIN_IMAGES),
                           _mnist_file(data_dir, MNIST_TRAIN_LABELS))
    test = load_mnist_idx(_mnist_file(data_dir, MNIST_TEST_IMAGES),
                          _mnist_file(data_dir, MNIST_TEST_LABELS))
    if config.train_limit is not None:
        train = train.subset(np.arange(min(config.train_limit, len(train))))
    if config.test_limit is not None:
        test = test.subset(np.arange(min(config.test_limit, len(test))))
    return train, test, f"mnist:{data_dir}"


def simulate(config: ExperimentConfig):
    """Run all rounds for one config; returns (metrics list, provenance dict)."""
    validate_config(config)
    train, test, source = resolve_dataset(config)
    if config.labels_per_party > train.num_classes:
        raise ConfigError(
            f"labels_per_party={config.labels_per_party} exceeds "
            f"{train.num_classes} classes in the dataset"
        )

    spec = PartitionSpec(config.parties, config.labels_per_party, config.seed)
    shards = partition_by_labels(train, spec, rng=substream(config.seed, TAG_PARTITION))
    parties = [
        Party(i, shard, config.batch_size, config.seed) for i, shard in enumerate(shards)
    ]

    layer_dims = (train.examples.shape[1], config.hidden_units, train.num_classes)
    model = init_mlp(layer_dims, seed=(config.seed, TAG_INIT))
    state = ServerState.initial(flatten_params(model), config.error_decay, config.eta)

    privacy = None
    clip_bound = None
    if config.algorithm in ("dp-signsgd", "ef-dp-signsgd"):
        clip_bound = config.clip_bound
        if config.sensitivity_mode == "clip":
            privacy = PrivacyParams.calibrated(config.epsilon, config.delta, config.clip_bound)
        else:
            # mean-gradient sensitivity 2C/B, using each party's actual batch size
            privacy = [
                PrivacyParams.calibrated(
                    config.epsilon, config.delta,
                    2.0 * config.clip_bound / min(config.batch_size, len(p.data)),
                )
                for p in parties
            ]

    n_adv = byzantine_count(config)
    adversaries = AdversaryConfig(config.byzantine_kind, n_adv) if n_adv else None
    residual_scale = None if config.residual_scale == "1/m" else 1.0

    metrics = []
    for _ in range(config.rounds):
        state, round_metrics = run_round(
            state, parties, config.algorithm, adversaries,
            layer_dims=layer_dims, test_data=test, privacy=privacy,
            clip_bound=clip_bound, master_seed=config.seed,
            residual_scale=residual_scale,
        )
        metrics.append(round_metrics)

    if privacy is None:
        sigma = None
    elif isinstance(privacy, list):
        sigma = [p.sigma for p in privacy]
    else:
        sigma = privacy.sigma
    provenance = {
        "config": asdict(config),
        "data_source": source,
        "num_params": int(state.weights.size),
        "byzantine_count": n_adv,
        "sigma": sigma,
        "party_sizes": [len(p.data) for p in parties],
    }
    return metrics, provenance


def write_metrics_csv(stream, metrics, provenance) -> None:
    """Header comments (prefixed '#') echoing provenance, then one row per round."""
    stream.write("# signfed metrics v1\n")
    for key in ("config", "data_source", "num_params", "byzantine_count", "sigma",
                "party_sizes"):
        stream.write(f"# {key}: {json.dumps(provenance[key], sort_keys=True)}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["round", "test_accuracy", "train_loss", "uplink_bytes", "downlink_bytes"])
    for m in metrics:
        writer.writerow([m.round, repr(m.test_accuracy), repr(m.train_loss),
                         m.uplink_bytes, m.downlink_bytes])


def summarize(metrics) -> dict:
    """Run summary; every number is recomputable from the CSV rows."""
    return {
        "rounds": len(metrics),
        "final_accuracy": metrics[-1].test_accuracy,
        "best_accuracy": max(m.test_accuracy for m in metrics),
        "final_train_loss": metrics[-1].train_loss,
        "total_uplink_bytes": sum(m.uplink_bytes for m in metrics),
        "total_downlink_bytes": sum(m.downlink_bytes for m in metrics),
    }


def run_experiment(config: ExperimentConfig, out: str | None = None) -> dict:
    """Execute one run, write its CSV (stdout when out is None), return the summary."""
    metrics, provenance = simulate(config)
    if out is None:
        write_metrics_csv(sys.stdout, metrics, provenance)
    else:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            write_metrics_csv(f, metrics, provenance)
    summary = summarize(metrics)
    summary["sigma"] = provenance["sigma"]
    return summary


def csv_body_bytes(config: ExperimentConfig) -> bytes:
    """The exact bytes run_experiment would write; used for determinism checks."""
    metrics, provenance = simulate(config)
    buffer = io.StringIO()
    write_metrics_csv(buffer, metrics, provenance)
    return buffer.getvalue().encode()


def preset_configs(name: str, base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Expand a preset into named runs (seeds base.seed .. base.seed+2).

    table1    — both DP variants at eps in {0.05, 0.1, 0.5, 1, 2}, c=4, delta=1e-5.
    byzantine — ef-dp-signsgd at eps=1, c=10, negative adversaries at 0/20/40%.
    """
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    runs = []
    seeds = [base.seed + s for s in range(PRESET_SEEDS)]
    if name == "table1":
        for algorithm in ("dp-signsgd", "ef-dp-signsgd"):
            for eps in TABLE1_EPSILONS:
                for seed in seeds:
                    cfg = replace(base, algorithm=algorithm, epsilon=eps,
                                  labels_per_party=4, byzantine_frac=0.0, seed=seed)
                    runs.append((f"table1_{algorithm}_eps{eps:g}_seed{seed}", cfg))
    else:
        for frac in BYZANTINE_FRACTIONS:
            for seed in seeds:
                cfg = replace(base, algorithm="ef-dp-signsgd", epsilon=1.0,
                              labels_per_party=10, byzantine_kind="negative",
                              byzantine_frac=frac, seed=seed)
                runs.append((f"byzantine_neg{int(frac * 100)}_seed{seed}", cfg))
    for _, cfg in runs:
        validate_config(cfg)
    return runs


def _run_named(args: tuple[str, ExperimentConfig, str]) -> tuple[str, dict]:
    run_name, config, out_dir = args
    summary = run_experiment(config, out=str(Path(out_dir) / f"{run_name}.csv"))
    return run_name, summary


def run_preset(name: str, base: ExperimentConfig, out_dir: str,
               workers: int | None = None) -> list[tuple[str, dict]]:
    """Run every config of a preset (in parallel processes), write per-run CSVs
    plus a summary.csv, and return the (name, summary) rows sorted by name."""
    runs = preset_configs(name, base)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(run_name, cfg, out_dir) for run_name, cfg in runs]
    if workers is None:
        workers = min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_named, jobs))
    else:
        results = [_run_named(job) for job in jobs]
    results.sort(key=lambda row: row[0])

    with open(Path(out_dir) / "summary.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["run", "final_accuracy", "best_accuracy", "final_train_loss",
                         "total_uplink_bytes", "total_downlink_bytes", "sigma"])
        for run_name, s in results:
            writer.writerow([run_name, repr(s["final_accuracy"]), repr(s["best_accuracy"]),
                             repr(s["final_train_loss"]), s["total_uplink_bytes"],
                             s["total_downlink_bytes"],
                             "" if s["sigma"] is None else json.dumps(s["sigma"])])
    return results


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="signfed",
        description="Differentially private sign-compressed federated learning runs",
    )
    parser.add_argument("--config", help="JSON config file; flags override its keys")
    parser.add_argument("--preset", choices=PRESET_NAMES,
                        help="run a full preset sweep instead of a single experiment")
    parser.add_argument("--out", help="CSV output path (single run) or directory (preset)")
    parser.add_argument("--algorithm", choices=ALGORITHMS)
    parser.add_argument("--dataset", choices=("mnist", "synthetic"))
    parser.add_argument("--data-dir", dest="data_dir",
                        help=f"directory with MNIST IDX files (default ${DATA_DIR_ENV})")
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--clip", dest="clip_bound", type=float)
    parser.add_argument("--parties", type=int)
    parser.add_argument("--labels-per-party", dest="labels_per_party", type=int)
    parser.add_argument("--byzantine-kind", dest="byzantine_kind", choices=ADVERSARY_KINDS)
    parser.add_argument("--byzantine-frac", dest="byzantine_frac", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--eta", type=float)
    parser.add_argument("--lambda", dest="error_decay", type=float,
                        help="error feedback decay rate")
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--train-limit", dest="train_limit", type=int)
    parser.add_argument("--test-limit", dest="test_limit", type=int)
    return parser


def parse_config(argv=None) -> tuple[ExperimentConfig, argparse.Namespace]:
    """Defaults < JSON config file < command-line flags; unknown file keys rejected."""
    parser = _build_parser()
    args = parser.parse_args(argv)

    values: dict = {}
    if args.config:
        try:
            with open(args.config) as f:
                file_values = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(file_values)

    known = {f.name for f in fields(ExperimentConfig)}
    for name, value in vars(args).items():
        if name in known and value is not None:
            values[name] = value

    try:
        config = ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return validate_config(config), args


def main(argv=None) -> int:
    try:
        config, args = parse_config(argv)
        if args.preset:
            if not args.out:
                raise ConfigError("--preset needs --out pointing at an output directory")
            results = run_preset(args.preset, config, args.out)
            for run_name, summary in results:
                print(f"{run_name}: final_accuracy={summary['final_accuracy']:.4f}")
            print(f"wrote {len(results)} runs to {args.out}")
        else:
            summary = run_experiment(config, out=args.out)
            for key, value in summary.items():
                print(f"{key}: {value}", file=sys.stderr)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
