"""Command-line entry point: generate, train, eval, cam, gradcheck, repro.

Every command accepts ``--config FILE`` (JSON, same layout as the
``config.json`` it writes) and explicit flags override the file. Exit codes:
0 success, 1 usage error, 2 runtime or validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from threadpoolctl import threadpool_limits

from .data import generate_starmen, generate_tumor, load_dataset, save_dataset, split_subjects
from .data.augment import AugmentRanges
from .evaluation import DICE_THRESHOLDS, evaluate, render_pair_overlays, write_report
from .model import BackboneConfig, init_weights, load_checkpoint, save_checkpoint
from .training import TASKS, GridResult, TrainConfig, grid_search_lr, loss_gradcheck, train

log = logging.getLogger("pairrank")

GENERATORS = ("starmen", "tumor")


class UsageError(Exception):
    pass


# -- configuration --------------------------------------------------------------------
@dataclass
class DatasetSpec:
    generator: Optional[str] = "starmen"
    subjects: Optional[int] = None  # generator default when None
    timepoints: int = 10  # starmen only
    image_size: Optional[int] = None
    manifest: Optional[str] = None  # external data instead of a generator
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        self.split = tuple(float(v) for v in self.split)


@dataclass
class EvalSelection:
    method: Optional[str] = None  # pairnet or csr; inferred from the checkpoint when None
    split: str = "test"
    dice: bool = False
    robustness: bool = False
    basis: str = "later"
    overlays: int = 8  # overlays rendered by repro
    alpha: float = 0.5


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    preset: str = "lite"
    standardize_input: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: bool = False
    evaluation: EvalSelection = field(default_factory=EvalSelection)
    out: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(
            dataset=DatasetSpec(**d.pop("dataset", {})),
            train=TrainConfig(**d.pop("train", {})),
            evaluation=EvalSelection(**d.pop("evaluation", {})),
            **d,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


# -- helpers ------------------------------------------------------------------------
def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _model_config(cfg: ExperimentConfig, dataset) -> BackboneConfig:
    size = dataset.samples[0].image.shape[-1]
    return BackboneConfig.preset(cfg.preset, input_size=size, input_channels=dataset.samples[0].image.shape[0],
                                 standardize_input=cfg.standardize_input)


def _ensure_split(dataset, cfg: ExperimentConfig):
    if not dataset.split:
        log.info("dataset has no stored split; splitting subjects with seed %d", cfg.seed)
        dataset = split_subjects(dataset, cfg.dataset.split, seed=cfg.seed)
    return dataset


# -- commands ---------------------------------------------------------------------
def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> Path:
    spec = cfg.dataset
    if spec.generator not in GENERATORS:
        raise UsageError(f"unknown dataset {spec.generator!r}; choose from {GENERATORS}")
    out = _prepare_out(Path(cfg.out), force)
    if spec.generator == "starmen":
        ds = generate_starmen(spec.subjects or 200, spec.timepoints, spec.image_size or 64, seed=cfg.seed)
    else:
        ds = generate_tumor(spec.subjects or 100, spec.image_size or 96, seed=cfg.seed)
    ds = split_subjects(ds, spec.split, seed=cfg.seed)
    save_dataset(ds, out)
    cfg.save(out / "config.json")
    log.info("wrote %d images of %d subjects to %s", len(ds), len(ds.subjects()), out)
    return out


def cmd_train(cfg: ExperimentConfig, data: str, force: bool = False) -> Path:
    data_dir = _require(data or cfg.dataset.manifest, "data")
    out = _prepare_out(Path(cfg.out), force)
    ds = _ensure_split(load_dataset(data_dir), cfg)
    mcfg = _model_config(cfg, ds)
    tcfg = cfg.train

    def factory():
        return init_weights(mcfg, seed=cfg.seed)

    def progress(epoch, tl, vl):
        log.info("epoch %3d  train %.6f  val %.6f", epoch, tl, vl)

    if cfg.grid and tcfg.ablation != "untrained":
        result: GridResult = grid_search_lr(factory, ds, tcfg)
        result.write_json(out / "grid.json")
        model, history = result.model, result.history
    else:
        model, history = train(factory(), ds, tcfg, progress=progress)
    train_targets = ds.targets(ds.indices("train"))
    model.meta = {
        "task": tcfg.task,
        "lr": history.lr,
        "seed": cfg.seed,
        "ablation": tcfg.ablation,
        "best_epoch": history.best_epoch,
        "stopping_epoch": history.stopping_epoch,
        "target_std": float(train_targets.std()),
    }
    save_checkpoint(model, out / "model.ckpt")
    history.write_csv(out / "history.csv")
    (out / "timing.log").write_text(f"wall_clock_seconds {history.wall_clock:.3f}\n")
    cfg.save(out / "config.json")
    log.info("trained %s (lr %g, best epoch %d) -> %s", tcfg.task, history.lr, history.best_epoch, out)
    return out


def _method_for(cfg: ExperimentConfig, model) -> str:
    if cfg.evaluation.method:
        return cfg.evaluation.method
    return "csr" if model.meta.get("task") == "csr" else "pairnet"


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, data: str, force: bool = False):
    ckpt = _require(checkpoint, "checkpoint")
    data_dir = _require(data or cfg.dataset.manifest, "data")
    model = load_checkpoint(ckpt)
    ds = _ensure_split(load_dataset(data_dir, model.config.input_size), cfg)
    out = _prepare_out(Path(cfg.out), force)
    ev = cfg.evaluation
    report = evaluate(model, ds, method=_method_for(cfg, model), split=ev.split,
                      dice_thresholds=None if not ev.dice else DICE_THRESHOLDS,
                      basis=ev.basis, robustness=ev.robustness)
    write_report(report, out)
    cfg.save(out / "config.json")
    print(f"pearson_r {report.pearson_r:.4f}  auc {report.auc:.4f}  pairs {report.n_pairs}")
    if report.dice_curve:
        print("dice " + " ".join(f"{t:.2f}:{v:.3f}" for t, v in report.dice_curve))
    if report.robustness:
        for k, v in report.robustness.items():
            print(f"  {k:<16s} r={v:.4f}")
    return report


def _parse_pair(text: str) -> Tuple[str, int, int]:
    parts = text.rsplit(":", 2)
    if len(parts) != 3:
        raise UsageError(f"--pair must look like SUBJECT:T_A:T_B, got {text!r}")
    try:
        return parts[0], int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise UsageError(f"--pair time indices must be integers: {text!r}") from exc


def cmd_cam(cfg: ExperimentConfig, checkpoint: str, data: str, pairs: Sequence[str] = (), limit=None,
            force: bool = False) -> List[Path]:
    ckpt = _require(checkpoint, "checkpoint")
    data_dir = _require(data or cfg.dataset.manifest, "data")
    model = load_checkpoint(ckpt)
    ds = _ensure_split(load_dataset(data_dir, model.config.input_size), cfg)
    out = _prepare_out(Path(cfg.out), force)
    wanted = [_parse_pair(p) for p in pairs] or None
    paths = render_pair_overlays(model, ds, out, pairs=wanted, split=cfg.evaluation.split,
                                 basis=cfg.evaluation.basis, alpha=cfg.evaluation.alpha,
                                 limit=limit if limit is not None else (None if wanted else cfg.evaluation.overlays))
    cfg.save(out / "config.json")
    print(f"wrote {len(paths)} overlays to {out}")
    return paths


def cmd_gradcheck(eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> bool:
    from .autodiff import op_suite

    reports = op_suite(seed=seed, eps=eps, tol=tol)
    reports += [loss_gradcheck(task, seed=seed, eps=eps, tol=tol) for task in TASKS]
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name:<{width}s}  max_rel_err {r.max_rel_err:.3e}  n={r.n_checked:<5d} {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in reports)
    print("all ops pass" if ok else "gradient check FAILED")
    return ok


@dataclass
class RunSpec:
    name: str
    task: str
    ablation: str = "none"
    grid: bool = True
    augment: bool = True  # only when the scenario trains with augmentation
    dice: bool = False
    robustness: bool = False
    cam: bool = False


def scenario_plan(name: str, quick: bool = False) -> Tuple[ExperimentConfig, List[RunSpec]]:
    """Dataset, training protocol and the list of runs behind one acceptance scenario."""
    cfg = ExperimentConfig()
    if name == "starmen":
        cfg.dataset = DatasetSpec("starmen", subjects=200, timepoints=10, image_size=64)
        cfg.train = TrainConfig(task="self_supervised", pairs_per_subject=10, max_epochs=15, grid_epochs=2)
        runs = [
            RunSpec("pairnet", "self_supervised", cam=True),
            RunSpec("frozen", "self_supervised", ablation="frozen_backbone"),
            RunSpec("untrained", "self_supervised", ablation="untrained", grid=False),
        ]
    elif name == "tumor":
        cfg.dataset = DatasetSpec("tumor", subjects=100, image_size=96)
        cfg.train = TrainConfig(task="supervised", max_epochs=20, grid_epochs=2, augment=AugmentRanges())
        cfg.standardize_input = True
        runs = [
            RunSpec("pairnet", "supervised", dice=True, robustness=True, cam=True),
            RunSpec("csr", "csr", dice=True, robustness=True),
            # no augmentation so the frozen features can be computed once
            RunSpec("frozen", "supervised", ablation="frozen_backbone", augment=False),
            RunSpec("untrained", "supervised", ablation="untrained", grid=False),
        ]
    else:
        raise UsageError(f"unknown scenario {name!r}; choose from {SCENARIOS} or 'all'")
    if quick:
        cfg.dataset.subjects = 10
        cfg.dataset.timepoints = 4
        cfg.dataset.image_size = 32
        cfg.train.max_epochs = 1
        cfg.train.grid_epochs = 1
        cfg.evaluation.overlays = 2
    return cfg, runs


SCENARIOS = ("starmen", "tumor")


def run_scenario(name: str, root: Path, seed: int = 0, quick: bool = False,
                 only: Optional[Sequence[str]] = None) -> dict:
    """generate -> train (lr grid) -> eval [-> cam] for every run of a scenario, below ``root/name``."""
    base, runs = scenario_plan(name, quick)
    base.seed = seed
    base.train.seed = seed
    data = root / name / "data"
    cmd_generate(_with_out(base, data), force=True)
    results = {}
    for spec in runs:
        if only is not None and spec.name not in only:
            continue
        run = _with_out(base, root / name / spec.name)
        run.train.task = spec.task
        run.train.ablation = spec.ablation
        if not spec.augment:
            run.train.augment = None
        run.grid = spec.grid
        run.evaluation.method = "csr" if spec.task == "csr" else "pairnet"
        run.evaluation.dice = spec.dice
        run.evaluation.robustness = spec.robustness
        ckpt = root / name / spec.name / "model.ckpt"
        start = time.perf_counter()
        cmd_train(run, str(data), force=True)
        report = cmd_eval(_with_out(run, root / name / spec.name / "eval"), str(ckpt), str(data), force=True)
        if spec.cam:
            cmd_cam(_with_out(run, root / name / spec.name / "cam"), str(ckpt), str(data), force=True)
        results[spec.name] = {"pearson_r": report.pearson_r, "auc": report.auc, "dice_curve": report.dice_curve,
                              "robustness": report.robustness, "seconds": time.perf_counter() - start}
    return results


def cmd_repro(cfg: ExperimentConfig, scenario: str, force: bool = False, quick: bool = False) -> dict:
    names = list(SCENARIOS) if scenario == "all" else [scenario]
    for n in names:
        if n not in SCENARIOS:
            raise UsageError(f"unknown scenario {n!r}; choose from {SCENARIOS} or 'all'")
    root = _prepare_out(Path(cfg.out), force)
    cfg.save(root / "config.json")
    results = {n: run_scenario(n, root, seed=cfg.seed, quick=quick) for n in names}
    (root / "summary.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


def _with_out(cfg: ExperimentConfig, out: Path) -> ExperimentConfig:
    c = ExperimentConfig.from_dict(cfg.to_dict())
    c.out = str(out)
    return c


# -- argument parsing -----------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _task(text: str) -> str:
    t = text.replace("-", "_")
    if t not in TASKS:
        raise argparse.ArgumentTypeError(f"unknown task {text!r}")
    return t


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pairrank", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON experiment config; flags override it")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out")
            sp.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    g = sub.add_parser("generate", help="write a synthetic longitudinal dataset")
    common(g)
    g.add_argument("--dataset", help="starmen or tumor")
    g.add_argument("--subjects", type=int)
    g.add_argument("--timepoints", type=int)
    g.add_argument("--image-size", type=int)

    t = sub.add_parser("train", help="train a model (optionally with the lr grid)")
    common(t)
    t.add_argument("--data")
    t.add_argument("--task", type=_task)
    t.add_argument("--preset")
    t.add_argument("--lr", help="learning rate or 'grid'")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--ablation", choices=("none", "frozen_backbone", "frozen-backbone", "untrained"))
    t.add_argument("--pairs-per-subject", type=int)
    t.add_argument("--grid-epochs", type=int, help="epoch cap per lr-grid run before retraining the winner")
    t.add_argument("--augment", action="store_true", default=None, help="random rigid/intensity augmentation")
    t.add_argument("--standardize-input", action="store_true", default=None,
                   help="per-image zero mean / unit variance in front of the backbone")

    for name, hlp in (("eval", "evaluate a checkpoint"), ("cam", "render change-map overlays")):
        e = sub.add_parser(name, help=hlp)
        common(e)
        e.add_argument("--checkpoint")
        e.add_argument("--data")
        e.add_argument("--split")
        e.add_argument("--basis", choices=("later", "earlier", "mean"))
        if name == "eval":
            e.add_argument("--method", choices=("pairnet", "csr"))
            e.add_argument("--dice", action="store_true", default=None)
            e.add_argument("--robustness", action="store_true", default=None)
        else:
            e.add_argument("--pair", action="append", default=[], help="SUBJECT:T_A:T_B (repeatable)")
            e.add_argument("--limit", type=int)
            e.add_argument("--alpha", type=float)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("repro", help="generate -> train(grid) -> eval -> cam for a scenario")
    common(r)
    r.add_argument("--scenario", default="all", help="starmen, tumor or all")
    r.add_argument("--quick", action="store_true", help="tiny sizes for a smoke run")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    a = vars(args)

    def given(key):
        return a.get(key) is not None

    if given("seed"):
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if given("out"):
        cfg.out = args.out
    if args.command == "generate":
        if given("dataset"):
            cfg.dataset.generator = args.dataset
        if given("subjects"):
            cfg.dataset.subjects = args.subjects
        if given("timepoints"):
            cfg.dataset.timepoints = args.timepoints
        if given("image_size"):
            cfg.dataset.image_size = args.image_size
    if args.command == "train":
        tc = asdict(cfg.train)
        tc["augment"] = cfg.train.augment
        for key in ("task", "batch_size", "patience", "max_epochs", "pairs_per_subject", "grid_epochs"):
            if given(key):
                tc[key] = a[key]
        if given("ablation"):
            tc["ablation"] = args.ablation.replace("-", "_")
        if given("lr"):
            if args.lr == "grid":
                cfg.grid = True
            else:
                try:
                    tc["lr"] = float(args.lr)
                except ValueError as exc:
                    raise UsageError(f"--lr must be a number or 'grid', got {args.lr!r}") from exc
                cfg.grid = False
        if args.augment:
            tc["augment"] = AugmentRanges()
        if given("preset"):
            cfg.preset = args.preset
        if args.standardize_input:
            cfg.standardize_input = True
        try:
            cfg.train = TrainConfig(**tc)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if args.command in ("eval", "cam"):
        ev = cfg.evaluation
        for key in ("split", "basis", "method", "dice", "robustness", "alpha"):
            if given(key):
                setattr(ev, key, a[key])
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args) if args.command != "gradcheck" else None
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 1

    threads = os.environ.get("PAIRRANK_THREADS")
    if threads:
        try:
            n_threads = int(threads)
        except ValueError:
            print(f"usage error: PAIRRANK_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 1
        with threadpool_limits(n_threads):
            return _dispatch(args, cfg)
    return _dispatch(args, cfg)


def _dispatch(args, cfg) -> int:
    try:
        if args.command == "generate":
            cmd_generate(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.force)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.data, args.force)
        elif args.command == "cam":
            cmd_cam(cfg, args.checkpoint, args.data, args.pair, args.limit, args.force)
        elif args.command == "gradcheck":
            return 0 if cmd_gradcheck(args.eps, args.tol, args.seed) else 2
        elif args.command == "repro":
            print(json.dumps(cmd_repro(cfg, args.scenario, args.force, args.quick), indent=1, sort_keys=True))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
