import types

import pytest
import torch

from promptcrs.config import BackboneConfig, TrainConfig
from promptcrs.data import EntityLinker, build_vocab, load_corpus, load_kg
from promptcrs.encoders import Backbone
from promptcrs.synth import generate_dataset
from promptcrs.training import pretrain_backbone, run_stage


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_data")
    manifest = generate_dataset(
        root, n_dialogs=40, n_items=12, n_entities=30, n_relations=2, seed=7
    )
    kg, names = load_kg(root / "kg.tsv", root / "entities.tsv")
    linker = EntityLinker.from_names(names)
    corpus = load_corpus(root / "corpus.jsonl", linker, kg)
    vocab = build_vocab(corpus, names)
    return types.SimpleNamespace(
        dir=root, manifest=manifest, kg=kg, names=names,
        linker=linker, corpus=corpus, vocab=vocab,
    )


@pytest.fixture(scope="session")
def micro_backbone(small_data):
    cfg = BackboneConfig(
        d_model=32, n_layers=2, n_heads=2, n_encoder_layers=1,
        max_ctx=512, vocab_size=len(small_data.vocab),
    )
    torch.manual_seed(0)
    bb = Backbone.fresh(cfg, seed=0)
    bb.freeze()
    return bb


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory, small_data):
    """A fully trained (briefly) checkpoint over the small corpus."""
    ckpt = tmp_path_factory.mktemp("tiny_ckpt")
    cfg = BackboneConfig(
        d_model=32, n_layers=2, n_heads=2, n_encoder_layers=1, max_ctx=512
    )
    pretrain_backbone(
        small_data.dir, ckpt, cfg, steps_decoder=40, steps_encoder=15, seed=0
    )
    for stage, steps in (
        ("fuse_pretrain", 25), ("generation", 20), ("recommendation", 20)
    ):
        run_stage(
            stage, ckpt, small_data.dir,
            config=TrainConfig.for_stage(stage, max_steps=steps, batch_size=4, seed=0),
        )
    return types.SimpleNamespace(ckpt_dir=ckpt, data=small_data)
