import pytest

from gesture_embed.encoder import EncoderConfig
from gesture_embed.skeleton import load_manifest
from gesture_embed.synth import SynthConfig, generate_corpus

TINY_SYNTH = SynthConfig(num_referents=3, samples_per_referent=12, dialogues=2, rounds=2, fps=5,
                         form_pairs_per_referent=8, seed=3)
TINY_ENCODER = EncoderConfig(feature_width=16, blocks_per_branch=1, heads=2, projection_width=8, max_frames=8)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    corpus = generate_corpus(TINY_SYNTH, root)
    return corpus


@pytest.fixture
def tiny_manifest(tiny_corpus):
    return load_manifest(tiny_corpus.root / "manifest.json")


# acceptance criteria record one line each; printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
