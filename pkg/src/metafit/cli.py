"""Command-line entry point: ``metafit {synth,train,eval,ablate,gradcheck}``.

Configuration comes from an optional INI file (``--config``) whose sections
group the :class:`RunConfig` fields; any field can be overridden with a flag
of the same name (``--eta 3``).  Flags win over the file.  Every command
writes the fully resolved configuration to ``config_echo.ini`` so a run can
be reproduced with ``--config <echo>``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import episodes, evaluation, nn, selfcheck, trainer
from .episodes import AugmentPolicy
from .errors import ConfigError, DataError, MetafitError, NumericError
from .metaloss import MetaConfig
from .trainer import TrainCheckpoint, TrainSchedule

log = logging.getLogger("metafit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METHODS = ("daml", "maml", "finetune", "knn")


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return int(text)


def _activation(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    if str(text).strip().lower() in ("inf", "never"):
        return math.inf
    return int(text)


def _field(section: str, default, parse):
    return dataclasses.field(default=default, metadata={"section": section, "parse": parse})


@dataclass
class RunConfig:
    """Every tunable of a run, grouped by INI section."""

    # [data]
    data_dir: str = _field("data", "data", str)
    n_train_classes: int = _field("data", 8, int)
    n_test_classes: int = _field("data", 3, int)
    samples_per_class: int = _field("data", 40, int)
    dim: int = _field("data", 8, int)
    data_seed: int = _field("data", 0, int)
    resolution: tuple = _field("data", (84, 84), _ints)
    channels: int = _field("data", 3, int)
    # [model]
    arch: str = _field("model", "mlp", str)
    widths: tuple = _field("model", (), _ints)
    # [meta]
    method: str = _field("meta", "daml", str)
    eta: float = _field("meta", 5.0, float)
    epsilon: float = _field("meta", 1e-6, float)
    gamma: float = _field("meta", 0.3, float)
    alpha: float = _field("meta", 0.001, float)
    inner_steps: int = _field("meta", 5, int)
    k: int = _field("meta", 5, int)
    q: int = _field("meta", 15, int)
    tasks_per_batch: int = _field("meta", 4, int)
    second_order: bool = _field("meta", False, _bool)
    loss_reduction: str = _field("meta", "mean", str)
    optimizer: str = _field("meta", "adam", str)
    precision: str = _field("meta", "float64", str)
    eval_inner_steps: int | None = _field("meta", None, _opt_int)
    # [schedule]
    total_iterations: int = _field("schedule", 3000, int)
    da_activation_iteration: float | None = _field("schedule", None, _activation)
    lr_decay_iterations: tuple = _field("schedule", (1500, 2500), _ints)
    lr_decay_factor: float = _field("schedule", 0.1, float)
    seed: int = _field("schedule", 0, int)
    checkpoint_every: int = _field("schedule", 500, int)
    resume: str = _field("schedule", "", str)
    # [augment]
    augment: bool = _field("augment", True, _bool)
    augment_query: bool = _field("augment", True, _bool)
    rotation_range: float = _field("augment", 30.0, float)
    hflip_prob: float = _field("augment", 0.5, float)
    vflip_prob: float = _field("augment", 0.5, float)
    scale_range: tuple = _field("augment", (0.8, 1.2), _floats)
    # [eval]
    out_dir: str = _field("eval", "runs/default", str)
    checkpoint: str = _field("eval", "", str)
    runs: int = _field("eval", 30, int)
    eval_seed: int = _field("eval", 0, int)
    eval_k: tuple = _field("eval", (), _ints)
    ft_steps: int = _field("eval", 100, int)
    n_neighbors: int | None = _field("eval", None, _opt_int)
    pretrain_iterations: int = _field("eval", 500, int)
    pretrain_lr: float = _field("eval", 0.001, float)
    ablate_eta: tuple = _field("eval", (1.0, 3.0, 5.0, 7.0), _floats)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.arch not in ("mlp", "conv4"):
            raise ConfigError(f"arch must be 'mlp' or 'conv4', got {self.arch!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        parsed = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in by_name:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                parsed[key] = by_name[key].metadata["parse"](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        return cls(**parsed)

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            eta=self.eta, epsilon=self.epsilon, gamma=self.gamma, alpha=self.alpha,
            inner_steps=self.inner_steps, k=self.k, q=self.q, tasks_per_batch=self.tasks_per_batch,
            second_order=self.second_order, loss_reduction=self.loss_reduction,
            optimizer=self.optimizer, precision=self.precision, eval_inner_steps=self.eval_inner_steps,
        )

    def schedule(self) -> TrainSchedule:
        act = math.inf if self.method == "maml" else self.da_activation_iteration
        return TrainSchedule(
            total_iterations=self.total_iterations, da_activation_iteration=act,
            lr_decay_iterations=self.lr_decay_iterations, lr_decay_factor=self.lr_decay_factor,
            seed=self.seed, checkpoint_every=self.checkpoint_every,
        )

    def augment_policy(self) -> AugmentPolicy:
        if not self.augment:
            return AugmentPolicy.disabled()
        return AugmentPolicy(
            rotate=self.rotation_range > 0, rotation_range=self.rotation_range,
            hflip_prob=self.hflip_prob, vflip_prob=self.vflip_prob,
            scale=True, scale_range=self.scale_range,
        )

    def arch_spec(self, sample_shape) -> nn.ArchSpec:
        if self.arch == "mlp":
            if len(sample_shape) != 1:
                raise ConfigError(f"mlp needs vector samples, data has shape {sample_shape}")
            return nn.ArchSpec.mlp(sample_shape[0], self.widths or (32, 32))
        return nn.ArchSpec("conv4", tuple(sample_shape), self.widths or (64,) * 4)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for f in fields(self):
            section = f.metadata["section"]
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, f.name, _format(getattr(self, f.name)))
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {value}" for key, value in cp.items(section))
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def read_ini(path) -> dict:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    sections = {f.name: f.metadata["section"] for f in fields(RunConfig)}
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key not in sections:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            if sections[key] != section:
                raise ConfigError(f"{path}: key {key!r} belongs in [{sections[key]}], found in [{section}]")
            values[key] = raw
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metafit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write synthetic meta-train/meta-test .npt trees",
        "train": "meta-train (daml or maml) and write checkpoints + logs",
        "eval": "meta-test a method and write EvalReports",
        "ablate": "eta x augmentation ablation table",
        "gradcheck": "finite-difference check of the autodiff engine",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="INI file with [section] key = value entries")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name}", dest=f.name, default=None, metavar="VALUE")
        if name == "gradcheck":
            p.add_argument("--trials", type=int, default=100, help="random instances per primitive")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_ini(args.config) if args.config else {}
    for name in RunConfig.field_names():
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig.from_mapping(values)


def write_echo(cfg: RunConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config_echo.ini"
    path.write_text(cfg.to_ini())
    return path


def _load_pair(cfg: RunConfig, need_test: bool = True):
    root = Path(cfg.data_dir)
    kw = {"resolution": cfg.resolution, "channels": cfg.channels}
    train = episodes.load_directory(root / "train", role=episodes.META_TRAIN, **kw)
    if not need_test and not (root / "test").is_dir():
        return train, None
    test = episodes.load_directory(root / "test", role=episodes.META_TEST, **kw)
    return episodes.make_dataset_pair(train, test)


def cmd_synth(cfg: RunConfig) -> int:
    train, test = episodes.synth_pools(
        cfg.data_seed, cfg.n_train_classes, cfg.n_test_classes, cfg.samples_per_class, cfg.dim
    )
    root = Path(cfg.data_dir)
    manifest = {
        "generator": "synth_pools",
        "seed": cfg.data_seed,
        "dim": cfg.dim,
        "train": episodes.export_npt_tree(train, root / "train"),
        "test": episodes.export_npt_tree(test, root / "test"),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_echo(cfg, root)
    print(f"wrote {len(manifest['train'])} train and {len(manifest['test'])} test classes to {root}")
    return EXIT_OK


def _train(cfg: RunConfig, out_dir, train_set) -> trainer.TrainResult:
    spec = cfg.arch_spec(train_set.sample_shape)
    resume = TrainCheckpoint.load(cfg.resume) if cfg.resume else None
    return trainer.train(
        spec, train_set, cfg.meta_config(), cfg.schedule(),
        resume=resume, out_dir=out_dir, augment_policy=cfg.augment_policy(),
        augment_query=cfg.augment_query,
    )


def cmd_train(cfg: RunConfig) -> int:
    if cfg.method not in ("daml", "maml"):
        raise ConfigError(f"train supports methods daml and maml, got {cfg.method!r}")
    train_set, _ = _load_pair(cfg, need_test=False)
    out = Path(cfg.out_dir)
    write_echo(cfg, out)
    result = _train(cfg, out, train_set)
    last = result.records[-1].meta_loss if result.records else float("nan")
    print(f"trained {cfg.method} to iteration {result.iteration}; last meta loss {last:.6g}; "
          f"checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _baseline_init(cfg: RunConfig, spec, train_set):
    if cfg.checkpoint:
        _, params = nn.load_params(cfg.checkpoint)
        return params
    return evaluation.pretrain_supervised(
        spec, train_set, iterations=cfg.pretrain_iterations, lr=cfg.pretrain_lr, seed=cfg.seed,
        augment_policy=cfg.augment_policy(), dtype=cfg.meta_config().dtype,
    )


def evaluate(cfg: RunConfig, train_set, test_set, k: int, params=None, spec=None) -> evaluation.EvalReport:
    spec = spec or cfg.arch_spec(test_set.sample_shape)
    mc = cfg.meta_config()
    if cfg.method in ("daml", "maml"):
        if params is None:
            path = cfg.checkpoint or Path(cfg.out_dir) / "checkpoints" / "last.mfc"
            spec, params = nn.load_params(path)
        return evaluation.meta_test(spec, params, test_set, mc, cfg.runs, cfg.eval_seed, k=k, method=cfg.method)
    if params is None:
        params = _baseline_init(cfg, spec, train_set)
    if cfg.method == "finetune":
        return evaluation.finetune_baseline(
            spec, params, test_set, mc, cfg.ft_steps, cfg.runs, cfg.eval_seed, k=k,
            augment_policy=cfg.augment_policy(),
        )
    return evaluation.knn_feature_baseline(spec, params, test_set, k, cfg.q, cfg.n_neighbors, cfg.runs, cfg.eval_seed)


def cmd_eval(cfg: RunConfig) -> int:
    train_set, test_set = _load_pair(cfg)
    out = Path(cfg.out_dir)
    # kept apart from the training echo that may share out_dir
    write_echo(cfg, out / "reports")
    spec = cfg.arch_spec(test_set.sample_shape)
    params = None
    if cfg.method in ("finetune", "knn"):
        params = _baseline_init(cfg, spec, train_set)
    for k in cfg.eval_k or (cfg.k,):
        report = evaluate(cfg, train_set, test_set, k, params=params, spec=spec if params is not None else None)
        jpath, _ = report.write(out / "reports" / f"{cfg.method}_k{k}")
        print(f"{cfg.method} k={k}: mean AUC {report.mean:.4f} +/- {report.std:.4f} over {report.runs} runs -> {jpath}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    train_set, test_set = _load_pair(cfg)
    out = Path(cfg.out_dir)
    write_echo(cfg, out)
    rows = []
    for eta in cfg.ablate_eta:
        for aug in (True, False):
            cell = dataclasses.replace(cfg, eta=eta, augment=aug, method="daml", resume="")
            cell_dir = out / "ablate" / f"eta{eta:g}_aug{'on' if aug else 'off'}"
            result = _train(cell, cell_dir, train_set)
            spec = cell.arch_spec(train_set.sample_shape)
            report = evaluation.meta_test(spec, result.params, test_set, cell.meta_config(), cell.runs,
                                          cell.eval_seed, method="daml")
            report.write(cell_dir / "report")
            rows.append({"eta": eta, "augment": "on" if aug else "off", "mean_auc": report.mean,
                         "std_auc": report.std, "runs": report.runs})
            print(f"eta={eta:g} aug={'on' if aug else 'off'}: mean AUC {report.mean:.4f}")
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "ablation.json").write_text(json.dumps(rows, indent=2))
    lines = ["eta,augment,mean_auc,std_auc,runs"]
    lines += [f"{r['eta']:g},{r['augment']},{r['mean_auc']!r},{r['std_auc']!r},{r['runs']}" for r in rows]
    (reports / "ablation.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, trials: int = 100) -> int:
    write_echo(cfg, cfg.out_dir)
    results = selfcheck.run_suite(trials=trials, seed=cfg.seed)
    for r in results:
        print(r.line())
    worst = max(r.max_error for r in results)
    failed = [r.name for r in results if not r.passed]
    print(f"max relative error {worst:.3e}")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_NUMERIC
    print("all checks passed")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.trials)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MetafitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
