"""Command-line front end: fit, score, calibrate, evaluate, demo.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from ._utils import thread_count
from .archive import load_archive
from .calibration import CalibrationMap, confidence, fit_calibration
from .demo import DEMO_DEFAULTS, METHODS, run_demo
from .energy import EnergyDetector
from .exceptions import DataError, NumericError, OODGuardError
from .gram import GramDetector
from .mahalanobis import MahalanobisDetector
from .metrics import evaluate, histogram_csv, histogram_report, report_json
from .micronet import load_net

DETECTORS = {cls.method: cls for cls in (MahalanobisDetector, GramDetector, EnergyDetector)}
SCORE_CHUNK = 4096
CALIBRATION_FILE = "calibration.json"

FIT_DEFAULTS = {
    "method": "energy",
    "ridge": None,
    "noise_magnitude": 0.0,
    "orders": [1, 2, 3, 4, 5],
    "epsilon_div": 1e-12,
    "temperature": 1.0,
    "holdout_fraction": 0.2,
    "calibration_fraction": 0.1,
    "seed": 0,
    "adversarial": None,
    "net": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_detector(directory):
    """Load whichever detector was saved in ``directory``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model manifest in {directory}: {exc}") from None
    method = manifest.get("method") if isinstance(manifest, dict) else None
    if method not in DETECTORS:
        raise DataError(f"unknown detector method {method!r}")
    return DETECTORS[method].load(directory, manifest)


def canonical_scores(detector, archive, net=None):
    """Canonical scores in archive order, chunked over OODGUARD_THREADS workers.

    Chunk boundaries do not depend on the thread count, so the output is
    identical for any number of workers.
    """
    n = archive.n_samples
    if n == 0:
        return np.empty(0)
    bounds = [(i, min(i + SCORE_CHUNK, n)) for i in range(0, n, SCORE_CHUNK)]

    def run(span):
        part = archive.subset(np.arange(*span))
        if isinstance(detector, MahalanobisDetector):
            return detector.score_samples(part, net)
        return detector.score_samples(part)

    with ThreadPoolExecutor(max_workers=min(thread_count(), len(bounds))) as pool:
        return np.concatenate(list(pool.map(run, bounds)))


def ood_flags(detector, cmap, scores):
    if isinstance(detector, MahalanobisDetector):
        return scores < cmap.tau
    # canonical score is the negated statistic
    return detector.is_ood(-scores)


def score_csv(scores, conf, flags):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_index", "canonical_score", "confidence", "is_ood"])
    for i, (s, c, f) in enumerate(zip(scores, conf, flags)):
        writer.writerow([i, repr(float(s)), repr(float(c)), int(f)])
    return buf.getvalue()


def read_score_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    try:
        return np.array([float(r["canonical_score"]) for r in rows])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"{path}: expected a canonical_score column of numbers") from None


def _load_net(path):
    return None if path is None else load_net(path)


def _build_detector(cfg):
    method = cfg["method"]
    if method == "mahalanobis":
        return MahalanobisDetector(cfg["ridge"], cfg["noise_magnitude"])
    if method == "gram":
        return GramDetector(
            tuple(cfg["orders"]), cfg["holdout_fraction"], cfg["epsilon_div"], random_state=cfg["seed"]
        )
    if method == "energy":
        return EnergyDetector(cfg["temperature"])
    raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def split_calibration(n, fraction, seed):
    """``(fit_index, calibration_index)``, both sorted."""
    if not 0 < fraction < 1:
        raise DataError("calibration_fraction must be in (0, 1)")
    if n < 2:
        raise DataError("need at least two samples to hold out a calibration slice")
    n_cal = min(n - 1, max(1, round(fraction * n)))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_cal:]), np.sort(perm[:n_cal])


def cmd_fit(cfg):
    detector = _build_detector(cfg)
    train = load_archive(cfg["train"])
    net = _load_net(cfg["net"])
    fit_idx, cal_idx = split_calibration(train.n_samples, cfg["calibration_fraction"], cfg["seed"])
    fit_part, cal_part = train.subset(fit_idx), train.subset(cal_idx)
    if isinstance(detector, MahalanobisDetector):
        adversarial = load_archive(cfg["adversarial"]) if cfg["adversarial"] else None
        detector.fit(fit_part, adversarial=adversarial, net=net)
    else:
        detector.fit(fit_part)
    cmap = fit_calibration(canonical_scores(detector, cal_part, net))
    out = Path(cfg["out"])
    detector.save(out)
    cmap.save(out / CALIBRATION_FILE)


def cmd_score(cfg):
    detector = load_detector(cfg["model"])
    cmap = CalibrationMap.load(Path(cfg["model"]) / CALIBRATION_FILE)
    archive = load_archive(cfg["archive"])
    scores = canonical_scores(detector, archive, _load_net(cfg["net"]))
    text = score_csv(scores, confidence(cmap, scores), ood_flags(detector, cmap, scores))
    _write(cfg["out"], text)


def cmd_calibrate(cfg):
    detector = load_detector(cfg["model"])
    archive = load_archive(cfg["archive"])
    scores = canonical_scores(detector, archive, _load_net(cfg["net"]))
    fit_calibration(scores).save(Path(cfg["model"]) / CALIBRATION_FILE)


def cmd_evaluate(cfg):
    a, b = read_score_csv(cfg["in_scores"]), read_score_csv(cfg["ood_scores"])
    rep = evaluate(a, b, cfg["trials"], cfg["seed"])
    _write(cfg["report"], report_json(rep, cfg["method"]))
    if cfg["histogram"]:
        _write(cfg["histogram"], histogram_csv(histogram_report(a, b, cfg["bins"])))


def cmd_demo(cfg):
    overrides = {k: cfg[k] for k in DEMO_DEFAULTS}
    table, scores = run_demo(cfg["seed"], **overrides)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "comparison.json", json.dumps(table, indent=2) + "\n")
    for method in METHODS:
        s = scores[method]
        for dataset in ("near", "far"):
            rows = histogram_report(s["test"], s[dataset], 20)
            _write(out / f"histogram_{method}_{dataset}.csv", histogram_csv(rows))


def _write(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None


COMMANDS = {
    "fit": (cmd_fit, FIT_DEFAULTS | {"train": None, "out": None}, ("train", "out")),
    "score": (cmd_score, {"model": None, "archive": None, "out": None, "net": None}, ("model", "archive", "out")),
    "calibrate": (cmd_calibrate, {"model": None, "archive": None, "net": None}, ("model", "archive")),
    "evaluate": (
        cmd_evaluate,
        {
            "in_scores": None,
            "ood_scores": None,
            "report": None,
            "histogram": None,
            "trials": 5,
            "seed": 0,
            "bins": 20,
            "method": "",
        },
        ("in_scores", "ood_scores", "report"),
    ),
    "demo": (cmd_demo, DEMO_DEFAULTS | {"seed": 0, "out": None}, ("out",)),
}


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    parser = _Parser(prog="oodguard", description="Out-of-distribution detection for trained classifiers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", help="JSON file of options; flags override it")

    p = sub.add_parser("fit", help="fit a detector and its calibration", argument_default=S)
    common(p)
    p.add_argument("--train", help="training archive manifest")
    p.add_argument("--out", help="model directory to write")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--ridge", type=float)
    p.add_argument("--noise-magnitude", type=float)
    p.add_argument("--orders", type=_int_list, help="e.g. 1,2,3,4,5")
    p.add_argument("--epsilon-div", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--holdout-fraction", type=float)
    p.add_argument("--calibration-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--adversarial", help="archive of adversarial samples for the layer combiner")
    p.add_argument("--net", help="micronet directory for input perturbation")

    p = sub.add_parser("score", help="score an archive with a fitted model", argument_default=S)
    common(p)
    p.add_argument("--model")
    p.add_argument("--archive")
    p.add_argument("--out", help="score CSV to write")
    p.add_argument("--net")

    p = sub.add_parser("calibrate", help="refit calibration from in-distribution data", argument_default=S)
    common(p)
    p.add_argument("--model")
    p.add_argument("--archive")
    p.add_argument("--net")

    p = sub.add_parser("evaluate", help="metrics report from two score CSVs", argument_default=S)
    common(p)
    p.add_argument("--in-scores")
    p.add_argument("--ood-scores")
    p.add_argument("--report", help="JSON report to write")
    p.add_argument("--histogram", help="histogram CSV to write")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--method", help="label stored in the report")

    p = sub.add_parser("demo", help="synthetic three-detector comparison", argument_default=S)
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--n-ood", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--noise-grid", type=_float_list)
    return parser


def resolve_config(command, flags):
    """Defaults, then the ``--config`` file, then explicit flags."""
    _, defaults, required = COMMANDS[command]
    cfg = dict(defaults)
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def main(argv=None):
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        COMMANDS[command][0](cfg)
    except UsageError as exc:
        print(f"oodguard {command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except (DataError, OODGuardError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"DataError: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
