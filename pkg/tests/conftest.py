import pytest

from app.services.dataset.corpus import load_corpus
from app.services.dataset.synth import SynthSpec, synth_corpus

FIXTURE_SEED = 7


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """3 个视频 × 100 帧，每个视频 4 次接触"""
    return synth_corpus(SynthSpec(), FIXTURE_SEED, tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def fixture_corpus(fixture_dir):
    return load_corpus(fixture_dir)


@pytest.fixture(scope="session")
def long_corpus_dir(tmp_path_factory):
    """2 个视频 × 600 帧，每个视频 4 次接触"""
    spec = SynthSpec(n_videos=2, n_frames=600, contacts_per_video=4)
    return synth_corpus(spec, FIXTURE_SEED, tmp_path_factory.mktemp("long"))


@pytest.fixture(scope="session")
def long_corpus(long_corpus_dir):
    return load_corpus(long_corpus_dir)
