"""Command-line driver: ``biasscan <command> --config FILE [options]``.

Output layout under the output directory::

    config.yaml                     resolved configuration
    checkpoints/clean.ckpt          cmd train
    checkpoints/backdoor.ckpt       cmd poison
    history/{clean,backdoor}.jsonl  per-epoch training records
    poisoned/                       IDX export of the poisoned training set
    eval/<model>_{pristine,poisoned}.{pgm,txt,json}, eval/<model>.json
    scans/<model>/alg{1,2}_<tag>/   bias map sets (index.json + raw maps)
    grids/*.pgm                     rendered map grids
    diagnosis/<tag>/, diagnosis/distances.csv, diagnosis/report.json
    logs/<command>.log              the only place timestamps appear
"""

from __future__ import annotations

import argparse
import fcntl
import hashlib
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report as R
from .attack import AttackConfig
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .diagnose import IncompatibleMaps, combine_reports, flag, map_distance
from .mnist import IdxError, LabeledDataset, load_idx, sample_batch, write_idx_images, write_idx_labels
from .model import CheckpointError, build_cnn, load_checkpoint, save_checkpoint
from .poison import poison_test, poison_train
from .scan import PER_CATEGORY, BiasMapSet, load_bias_maps, save_bias_maps, scan_algorithm_one, scan_algorithm_two
from .tensor import NUM_CLASSES
from .trainer import attack_success, confusion, finetune, history_jsonl, mean_digit_maps, train

log = logging.getLogger("biasscan")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_LOCKED = 5


class MissingArtifact(FileNotFoundError):
    pass


class OutputLocked(RuntimeError):
    pass


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    fh = open(out / ".lock", "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except BlockingIOError:
        fh.close()
        raise OutputLocked(f"another biasscan process holds {out / '.lock'}") from None
    try:
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


class Run:
    """Resolved config plus lazily loaded datasets for one invocation."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self._train: LabeledDataset | None = None
        self._test: LabeledDataset | None = None

    def _load(self, images: str, labels: str, limit: int | None) -> LabeledDataset:
        for key in (images, labels):
            if not self.cfg.data_path(key).exists():
                raise MissingArtifact(f"data file not found: {self.cfg.data_path(key)}")
        ds = load_idx(self.cfg.data_path(images), self.cfg.data_path(labels))
        return sample_batch(ds, limit, 0) if limit is not None and limit < len(ds) else ds

    @property
    def train_set(self) -> LabeledDataset:
        if self._train is None:
            self._train = self._load("train_images", "train_labels", self.cfg.data.train_limit)
        return self._train

    @property
    def test_set(self) -> LabeledDataset:
        if self._test is None:
            self._test = self._load("test_images", "test_labels", self.cfg.data.test_limit)
        return self._test

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def clean_ckpt(self) -> Path:
        return self.out / "checkpoints" / "clean.ckpt"

    @property
    def backdoor_ckpt(self) -> Path:
        return self.out / "checkpoints" / "backdoor.ckpt"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{path} not found; run `biasscan {hint}` first")
        return path

    def poisoned_test(self) -> LabeledDataset:
        return poison_test(self.test_set, self.cfg.poison, donors=self.train_set)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(run: Run) -> Path:
    cfg = run.cfg
    model = build_cnn(cfg.model_seed)
    model, history = train(model, run.train_set, cfg.clean)
    test_acc = confusion(model, run.test_set).accuracy
    history.append({"epoch": cfg.clean.epochs, "split": "test", "role": "clean", "accuracy": test_acc})
    log.info("clean model: pristine test accuracy %.4f", test_acc)
    save_checkpoint(model, run.path("checkpoints", "clean.ckpt"), {"model_seed": cfg.model_seed})
    run.path("history", "clean.jsonl").write_text(history_jsonl(history))
    return run.clean_ckpt


def cmd_poison(run: Run) -> Path:
    cfg = run.cfg
    clean = load_checkpoint(run.require(run.clean_ckpt, "train"))
    poisoned = poison_train(run.train_set, cfg.poison)
    export = run.path("poisoned", "provenance.json").parent
    write_idx_images(export / "train-images-idx3-ubyte", poisoned.images)
    write_idx_labels(export / "train-labels-idx1-ubyte", poisoned.labels)
    _write_json(export / "provenance.json", {
        "plan": cfg.poison.to_dict(),
        "poisoned_indices": np.flatnonzero(poisoned.poisoned).tolist(),
        "size": len(poisoned),
    })
    maps, empty = mean_digit_maps(poisoned)
    counts = poisoned.class_counts()
    digits = BiasMapSet(PER_CATEGORY, maps, counts, np.diag(counts), {})
    R.render_grid(digits, export / "mean_digits", png=cfg.png)

    model, history = finetune(clean, poisoned, cfg.finetune, run.test_set, run.poisoned_test())
    save_checkpoint(model, run.path("checkpoints", "backdoor.ckpt"),
                    {"model_seed": cfg.model_seed, "poison": cfg.poison.to_dict()})
    run.path("history", "backdoor.jsonl").write_text(history_jsonl(history))
    return run.backdoor_ckpt


def cmd_eval(run: Run, checkpoints: list[Path] | None = None) -> dict:
    if not checkpoints:
        checkpoints = [p for p in (run.clean_ckpt, run.backdoor_ckpt) if p.exists()]
        if not checkpoints:
            raise MissingArtifact(f"no checkpoints under {run.out / 'checkpoints'}; run `biasscan train` first")
    poisoned = run.poisoned_test()
    results = {}
    for ckpt in checkpoints:
        model = load_checkpoint(run.require(Path(ckpt), "train"))
        name = Path(ckpt).stem
        pristine_cm = confusion(model, run.test_set)
        poisoned_cm = confusion(model, poisoned)
        R.render_confusion(pristine_cm, run.path("eval", f"{name}_pristine"), png=run.cfg.png)
        R.render_confusion(poisoned_cm, run.path("eval", f"{name}_poisoned"), png=run.cfg.png)
        summary = {
            "checkpoint": Path(ckpt).name,
            "pristine_accuracy": pristine_cm.accuracy,
            "poisoned_accuracy": poisoned_cm.accuracy,
            "attack_success": attack_success(model, poisoned),
            "trigger": run.cfg.poison.trigger.trigger_id,
        }
        _write_json(run.path("eval", f"{name}.json"), summary)
        log.info("%s: pristine %.4f, attack success %.4f", name,
                 summary["pristine_accuracy"], summary["attack_success"])
        results[name] = summary
    return results


def _pair_grid(cfg: AttackConfig) -> AttackConfig:
    return cfg if cfg.loss_kind == "paired" else replace(cfg, loss_kind="paired")


def _grids_for(run: Run, algorithm: str) -> list[tuple[int, AttackConfig]]:
    jobs: list[tuple[int, AttackConfig]] = []
    if algorithm in ("one", "both"):
        jobs += [(1, a) for a in run.cfg.attacks]
    if algorithm in ("two", "both"):
        pairs = run.cfg.pairs or tuple(_pair_grid(a) for a in run.cfg.attacks)
        jobs += [(2, a) for a in pairs]
    if not jobs:
        raise ConfigError(f"no attack configurations for algorithm {algorithm!r}")
    return jobs


def scan_model(run: Run, ckpt: Path, alg: int, acfg: AttackConfig) -> BiasMapSet:
    """Scan one checkpoint, reusing a stored result with the same model and config."""
    ckpt = run.require(Path(ckpt), "train")
    digest = _sha256(ckpt)
    directory = run.out / "scans" / ckpt.stem / f"alg{alg}_{acfg.tag}"
    source = directory / "source.json"
    if source.exists():
        info = json.loads(source.read_text())
        if info.get("checkpoint_sha256") == digest and info.get("config") == acfg.to_dict():
            log.info("reusing %s", directory)
            return load_bias_maps(directory)
    model = load_checkpoint(ckpt)
    fn = scan_algorithm_one if alg == 1 else scan_algorithm_two
    log.info("scanning %s with algorithm %d (%s)", ckpt.name, alg, acfg.tag)
    bms = fn(model, acfg, run.train_set, workers=run.cfg.workers)
    save_bias_maps(bms, directory)
    _write_json(source, {"checkpoint": ckpt.name, "checkpoint_sha256": digest, "config": acfg.to_dict()})
    return bms


def cmd_scan(run: Run, checkpoint: Path | None = None, algorithm: str = "one") -> list[Path]:
    ckpt = Path(checkpoint) if checkpoint else run.backdoor_ckpt
    written = []
    for alg, acfg in _grids_for(run, algorithm):
        bms = scan_model(run, ckpt, alg, acfg)
        written += R.write_image(R.render_grid(bms), run.path("grids", f"{ckpt.stem}_alg{alg}_{acfg.tag}"),
                                 png=run.cfg.png)
    return written


def cmd_diagnose(run: Run, suspect: Path | None = None, reference: Path | None = None,
                 algorithm: str = "one"):
    suspect = Path(suspect) if suspect else run.backdoor_ckpt
    reference = Path(reference) if reference else run.clean_ckpt
    s_fp = load_checkpoint(run.require(suspect, "poison")).fingerprint
    r_fp = load_checkpoint(run.require(reference, "train")).fingerprint
    if s_fp != r_fp:
        raise IncompatibleMaps(f"architectures differ: {s_fp!r} vs {r_fp!r}")
    reports = []
    for alg, acfg in _grids_for(run, algorithm):
        s_maps = scan_model(run, suspect, alg, acfg)
        r_maps = scan_model(run, reference, alg, acfg)
        R.render_grid([s_maps, r_maps], run.path("grids", f"pair_alg{alg}_{acfg.tag}"), png=run.cfg.png)
        if alg == 1:
            rep = flag(map_distance(s_maps, r_maps), run.cfg.threshold, acfg.to_dict())
            R.write_tables(rep, run.out / "diagnosis" / acfg.tag)
            reports.append(rep)
    if not reports:
        return None
    final = reports[0] if len(reports) == 1 else combine_reports(reports, run.cfg.threshold)
    R.write_tables(final, run.out / "diagnosis")
    log.info("verdict %s; flagged %s; argmax %s", final.verdict, final.flagged, final.argmax)
    return final


def cmd_repro(run: Run, algorithm: str = "both"):
    cmd_train(run)
    cmd_poison(run)
    cmd_eval(run)
    for ckpt in (run.backdoor_ckpt, run.clean_ckpt):
        cmd_scan(run, ckpt, algorithm)
    return cmd_diagnose(run, algorithm=algorithm)


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------


def _epsilon_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment YAML file")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="run seed for attack sampling (overrides run_seed)")
    common.add_argument("--algorithm", choices=("one", "two", "both"), help="scan algorithm(s)")
    common.add_argument("--epsilon", type=_epsilon_list, help="comma-separated step sizes")
    common.add_argument("--seed-kind", choices=("blank", "noise", "data", "all"))
    common.add_argument("--samples", type=int, help="samples per cell")
    common.add_argument("--iters", type=int, help="attack iterations")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="biasscan", description="Backdoor detection via bias maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the clean model")
    sub.add_parser("poison", parents=[common], help="poison the training set and fine-tune")
    p = sub.add_parser("eval", parents=[common], help="confusion matrices on pristine and poisoned tests")
    p.add_argument("--checkpoint", type=Path, action="append")
    p = sub.add_parser("scan", parents=[common], help="compute bias maps for one checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("diagnose", parents=[common], help="compare a suspect model against a reference")
    p.add_argument("--suspect", type=Path)
    p.add_argument("--reference", type=Path)
    sub.add_parser("repro", parents=[common], help="run the whole pipeline")
    return parser


def _setup_logging(out: Path, command: str, verbose: bool) -> list[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    (out / "logs").mkdir(parents=True, exist_ok=True)
    logfile = logging.FileHandler(out / "logs" / f"{command}.log", mode="a")
    logfile.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(console)
    root.addHandler(logfile)
    return [console, logfile]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(
            out=args.out, seed=args.seed, epsilons=args.epsilon, seed_kind=args.seed_kind,
            samples=args.samples, iters=args.iters)
    except (ConfigError, OSError) as exc:
        print(f"biasscan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg)
    algorithm = args.algorithm or ("both" if args.command == "repro" else "one")
    handlers = []
    try:
        with output_lock(run.out):
            handlers = _setup_logging(run.out, args.command, args.verbose)
            run.path("config.yaml").write_text(dump_config(cfg))
            if args.command == "train":
                cmd_train(run)
            elif args.command == "poison":
                cmd_poison(run)
            elif args.command == "eval":
                cmd_eval(run, args.checkpoint)
            elif args.command == "scan":
                cmd_scan(run, args.checkpoint, algorithm)
            elif args.command == "diagnose":
                rep = cmd_diagnose(run, args.suspect, args.reference, algorithm)
                if rep is not None:
                    print(json.dumps({"verdict": rep.verdict, "flagged": rep.flagged, "argmax": rep.argmax}))
            elif args.command == "repro":
                rep = cmd_repro(run, algorithm)
                if rep is not None:
                    print(json.dumps({"verdict": rep.verdict, "flagged": rep.flagged, "argmax": rep.argmax}))
    except OutputLocked as exc:
        print(f"biasscan: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except ConfigError as exc:
        print(f"biasscan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, IdxError) as exc:
        print(f"biasscan: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, IncompatibleMaps) as exc:
        print(f"biasscan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as exc:  # noqa: BLE001 - report, do not dump a trace at the user
        log.exception("command failed")
        print(f"biasscan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        for h in handlers:
            logging.getLogger().removeHandler(h)
            h.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
