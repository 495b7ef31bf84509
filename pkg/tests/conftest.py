"""Session fixtures for the desk-scale overfit runs and the acceptance summary."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import torch

from magnet import config
from magnet import dataset as ds
from magnet import dfot as df
from magnet import pipeline
from magnet import vqvae as vq

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.conf"

# criterion number -> (passed, detail); filled by test_acceptance.py
RESULTS: dict[int, tuple[bool, str]] = {}


@dataclass
class Run:
    cfg: config.RunConfig
    seqs: list
    vq_result: vq.VQVAETrainResult
    dfot_result: df.DFoTTrainResult
    codec: df.TokenCodec
    tokens: list
    seconds: float
    deterministic: dict = field(default_factory=dict)

    @property
    def vqvae(self):
        return self.vq_result.model

    @property
    def model(self):
        return self.dfot_result.model


def desk_config(*overrides: str) -> config.RunConfig:
    cfg = config.load(DESK)
    for item in overrides:
        key, _, value = item.partition("=")
        cfg.set(key, value)
    return cfg


def desk_corpus(mode, cfg):
    seeds, _ = ds.train_val_seeds(cfg["data.n_train"], 0, base=cfg["seed"])
    return [ds.preprocess(ds.generate_interaction(mode, cfg["data.P"], cfg["data.T"], s)) for s in seeds]


def train_desk(mode, cfg, vqvae=None):
    """VQ-VAE then DFoT on the desk corpus; ``vqvae`` skips the tokenizer stage."""
    seqs = desk_corpus(mode, cfg)
    t0 = time.perf_counter()
    vq_res = vqvae or vq.train_vqvae(seqs, cfg.vq(), cfg.vq_train(), seed=cfg["seed"])
    tokenizer = None if cfg["dfot.raw_features"] else vq_res.model
    omega = cfg["vq.omega"]
    d_z = omega * (cfg["vq.n_joints"] * 6 + 9) if tokenizer is None else tokenizer.config.d_vq
    dcfg = cfg.dfot(d_z)
    codec = pipeline.fit_codec(seqs, tokenizer, dcfg.layout)
    tokens = pipeline.tokenize(seqs, tokenizer, codec)
    d_res = df.train_dfot(tokens, dcfg, codec, cfg.dfot_train(), seed=cfg["seed"])
    return Run(cfg, seqs, vq_res, d_res, codec, tokens, time.perf_counter() - t0)


def _same_state(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.fixture(scope="session")
def orbit_run() -> Run:
    """The overfit model on four orbit sequences, trained twice to check bitwise determinism."""
    cfg = desk_config()
    first = train_desk("orbit", cfg)
    second = train_desk("orbit", cfg)
    first.deterministic = {
        "vqvae": first.vq_result.history == second.vq_result.history and _same_state(first.vqvae, second.vqvae),
        "dfot": first.dfot_result.history == second.dfot_result.history and _same_state(first.model, second.model),
    }
    first.seconds += second.seconds
    return first


@pytest.fixture(scope="session")
def mirror_run() -> Run:
    return train_desk("mirror", desk_config("data.mode=mirror"))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
