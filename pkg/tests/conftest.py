"""Session fixtures: one trained model pair and the evaluation corpus.

Training runs once per session (about five CPU-minutes) and is shared by the
pipeline, CLI and acceptance tests.
"""
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from irisxxs.data import write_corpus
from irisxxs.synth import SceneParams
from irisxxs.training import train_task

# training corpus: disjoint identities from the evaluation corpus (different
# seed), wider nuisance ranges, iris radius spread so smaller eyes are seen
TRAIN_PARAMS = SceneParams(iris_radius=50, noise_sigma=10, gaze=0.1, jitter=10, dilation_jitter=0.05)
TRAIN_IDENTITIES = 125  # 100 train / 25 val identities, two eyes each -> 200 iris crops
TRAIN_SEED = 1000
RECIPE = {
    "segment_iris": dict(epochs=12, lr=0.02, negatives=0.0),
    "find_eyes": dict(epochs=12, lr=0.02, negatives=0.5, flips=True),
}

# filled by the acceptance tests, echoed at the end of the run
ACCEPTANCE_LINES = []

EVAL_PARAMS = SceneParams(iris_radius=50, noise_sigma=10, gaze=0.1, jitter=10, dilation_jitter=0.05)


@dataclass
class TrainedModels:
    root: Path
    config: Path
    eyes_weights: Path
    iris_weights: Path
    logs: dict
    cpu_seconds: dict
    train_images: dict


def _train(task, manifest, out):
    t0 = time.process_time()
    model, log = train_task(task, manifest, seed=0, **RECIPE[task])
    cpu = time.process_time() - t0
    model.save(out)
    return model, log, cpu


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    corpus = write_corpus(root / "train", TRAIN_IDENTITIES, 1, TRAIN_PARAMS, occlusion_max=0.3, seed=TRAIN_SEED,
                          radius_jitter=0.35)
    logs, cpu, counts = {}, {}, {}
    paths = {"segment_iris": root / "segment_iris.bin", "find_eyes": root / "find_eyes.bin"}
    for task, path in paths.items():
        model, logs[task], cpu[task] = _train(task, corpus, path)
    from irisxxs.training import task_pairs
    train_part, _ = corpus.split(0, (0.8, 0.2))
    counts["segment_iris"] = len(task_pairs(train_part, "segment_iris")[0])
    conf = root / "pipeline.conf"
    conf.write_text(f"find_eyes_weights = {paths['find_eyes']}\nsegment_iris_weights = {paths['segment_iris']}\n")
    return TrainedModels(root, conf, paths["find_eyes"], paths["segment_iris"], logs, cpu, counts)


@pytest.fixture(scope="session")
def eval_corpus(tmp_path_factory):
    """20 identities x 5 samples, noise 10, occlusion up to 0.2."""
    out = tmp_path_factory.mktemp("eval")
    manifest = write_corpus(out, 20, 5, EVAL_PARAMS, occlusion_max=0.2, seed=7)
    return manifest


@pytest.fixture(scope="session")
def pipeline(trained):
    from irisxxs.data import load_config
    from irisxxs.pipeline import Pipeline

    return Pipeline.from_config(load_config(trained.config))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
