"""Three-detector comparison on a synthetic blob task."""
from __future__ import annotations

from .energy import EnergyDetector
from .gram import GramDetector
from .mahalanobis import NOISE_GRID, MahalanobisDetector, search_noise_magnitude
from .metrics import METRICS, evaluate
from .micronet import fgsm, init_net, to_archive, train
from .synthetic import SyntheticTask, generate_task, sample_task

DEMO_DEFAULTS = {
    "n_classes": 4,
    "dim": 2,
    "radius": 6.0,
    "sigma": 1.0,
    "far_distance": 20.0,
    "hidden": [32, 32],
    "epochs": 200,
    "lr": 0.05,
    "n_per_class": 250,
    "n_ood": 500,
    "adversarial_epsilon": 0.1,
    "noise_grid": list(NOISE_GRID),
    "ridge": None,
    "orders": [1, 2, 3, 4, 5],
    "epsilon_div": 1e-12,
    "temperature": 1.0,
    "holdout_fraction": 0.2,
    "trials": 5,
}

METHODS = ("mahalanobis", "gram", "energy")
DATASETS = ("near", "far")


def run_demo(seed=0, **overrides):
    """Train a micronet on ring blobs and compare all detectors on near and far OOD.

    Returns ``(table, scores)``. ``table[method][dataset][metric]`` holds
    the point value plus bootstrap mean and sd; ``scores[method][split]``
    holds the canonical scores for ``test``, ``near`` and ``far``.
    """
    cfg = {**DEMO_DEFAULTS, **overrides}
    specs = {
        kind: SyntheticTask.ring(
            cfg["n_classes"], cfg["dim"], cfg["radius"], cfg["sigma"], kind, seed, cfg["far_distance"]
        )
        for kind in DATASETS
    }
    X, y, *_ = sample_task(specs["far"], cfg["n_per_class"], cfg["n_ood"])
    sizes = [cfg["dim"], *cfg["hidden"], cfg["n_classes"]]
    net = train(init_net(sizes, seed), X, y, cfg["epochs"], cfg["lr"], seed)

    train_arch, test_arch, far_arch = generate_task(specs["far"], net, cfg["n_per_class"], cfg["n_ood"])
    near_arch = generate_task(specs["near"], net, cfg["n_per_class"], cfg["n_ood"])[2]
    splits = {"test": test_arch, "near": near_arch, "far": far_arch}

    noise, _ = search_noise_magnitude(
        net, X, y, tuple(cfg["noise_grid"]), cfg["adversarial_epsilon"], cfg["ridge"]
    )
    adversarial = to_archive(net, fgsm(net, X, y, cfg["adversarial_epsilon"]), y)
    maha = MahalanobisDetector(cfg["ridge"], noise).fit(train_arch, adversarial=adversarial, net=net)
    gram = GramDetector(
        tuple(cfg["orders"]), cfg["holdout_fraction"], cfg["epsilon_div"], random_state=seed
    ).fit(train_arch)
    energy = EnergyDetector(cfg["temperature"]).fit(train_arch)

    scores = {
        "mahalanobis": {k: maha.score_samples(a, net) for k, a in splits.items()},
        "gram": {k: gram.score_samples(a) for k, a in splits.items()},
        "energy": {k: energy.score_samples(a) for k, a in splits.items()},
    }
    table = {"seed": seed, "noise_magnitude": noise, "results": {}}
    for method in METHODS:
        s = scores[method]
        row = {}
        for dataset in DATASETS:
            rep = evaluate(s["test"], s[dataset], cfg["trials"], seed)
            row[dataset] = {
                name: {"value": float(fn(s["test"], s[dataset])), **rep[name]}
                for name, fn in METRICS.items()
            }
        table["results"][method] = row
    return table, scores
