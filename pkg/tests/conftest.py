import numpy as np
import pytest

from sketchalign.config import RunConfig
from sketchalign.data import generate_synthetic
from sketchalign.model import RetrievalModel
from sketchalign.textgen import TEMPLATES, OfflineCorpusClient, generate_descriptions
from sketchalign.train import prepare_descriptions


def tiny_config(**overrides) -> RunConfig:
    """A config small enough for per-test training: 16px rasters, dim 16."""
    cfg = RunConfig.profile("desk").override(
        model={"dim": 16, "heads": 2, "layers": 1, "text_layers": 1,
               "cross_heads": 2, "rn_hidden": 8},
        data={"input_size": 16, "patch": 8, "conv_channels": (4, 8, 16, 16),
              "conv_strides": (2, 2, 2, 1)},
        text={"max_text_len": 16},
        train={"triplets": 2, "epochs": 2},
        synthetic={"per_category": 4, "render_size": 32},
    )
    return cfg.override(**overrides) if overrides else cfg


@pytest.fixture(scope="session")
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg, tmp_path_factory):
    """Synthetic corpus + descriptions + vocabulary shared across fast tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = generate_synthetic(tiny_cfg.synthetic, root, data_digest=tiny_cfg.data_digest)
    client = OfflineCorpusClient(root / "corpus.jsonl")
    descriptions = generate_descriptions(
        manifest.seen_categories, TEMPLATES[tiny_cfg.text.template_id], client,
        k=tiny_cfg.text.k_sentences, data_digest=tiny_cfg.data_digest)
    vocab = prepare_descriptions(descriptions, manifest, tiny_cfg)
    return {"root": root, "manifest": manifest, "descriptions": descriptions,
            "vocab": vocab}


@pytest.fixture()
def tiny_model(tiny_cfg, tiny_corpus) -> RetrievalModel:
    return RetrievalModel(tiny_cfg, vocab_size=len(tiny_corpus["vocab"]), init_seed=3)


def rand_tokens(rng: np.random.Generator, n: int, d: int):
    from sketchalign.encoder import TokenSequence
    from sketchalign.tensor import Tensor
    return TokenSequence(Tensor(rng.uniform(-1, 1, (n, d))), modality="sketch",
                         has_global=n >= 2)
