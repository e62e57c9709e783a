"""Process-wide cache of the toy training runs shared by the slow tests."""
import functools
import time

from normtr.experiments import Ablations, ExperimentConfig, build_dataset, run

VARIANTS = {
    "on": Ablations(),
    "off": Ablations(no_scheme=True),
    "swap": Ablations(swap_qkv=True),
}


@functools.lru_cache(maxsize=None)
def dataset():
    return build_dataset(ExperimentConfig())


@functools.lru_cache(maxsize=None)
def trained(variant, seed):
    """Returns (model, FitResult, training seconds) for one toy run."""
    exp = ExperimentConfig(seed=seed, ablations=VARIANTS[variant])
    start = time.perf_counter()
    model, result = run(exp, dataset())
    return model, result, time.perf_counter() - start
