"""Run configuration: a flat ``key = value`` text file with ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

TASKS = ("gen_uncond", "gen_cond", "node_class", "graph_regress")


@dataclass
class RunConfig:
    task: str = "gen_uncond"
    # data
    dataset: str = "grammar"  # grammar | sbm | path/to/file.jsonl
    data_count: int = 2000
    data_seed: int = 0
    split_seed: int = 0
    sbm_n_per_block: int = 30
    sbm_blocks: int = 3
    sbm_p_in: float = 0.3
    sbm_p_out: float = 0.02
    # model
    d_latent: int = 16
    hidden: int = 64
    heads: int = 4
    L_enc: int = 5
    L_denoise: int = 4
    hidden_denoise: int = 0  # denoiser width; 0 = hidden
    pe_eig: int = 8
    # gyrokernel
    components: tuple = (-1, 0, 1)
    ball_dim: int = 4
    m: int = 64
    s: float = 1.0
    bank_seed: int = 0
    # diffusion
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02
    guidance_mode: str = "cfgpp"
    lambda_g: float = 0.6
    w: float = 1.0
    p_uncond: float = 0.1
    k: int = 10
    kmeans_iters: int = 100
    literal_eq9: bool = False
    latent_rank: int = 0  # principal directions per row type fed to diffusion; 0 = d_latent
    latent_sample: bool = False  # train diffusion on posterior draws instead of posterior means
    self_guidance: bool = True
    # optimisation
    beta_kl: float = 1e-3
    ae_lr: float = 1e-3
    ae_wd: float = 1e-5
    ae_epochs: int = 50
    diff_lr: float = 1e-4
    diff_wd: float = 1e-6
    diff_epochs: int = 100
    batch: int = 64
    # generation / prediction
    gen_count: int = 256
    gen_batch: int = 64
    condition: str = ""
    predict_split: str = "test"
    # run
    seed: int = 0
    precision: str = "float32"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        self.components = tuple(int(c) for c in self.components)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().with_overrides(_parse_lines(text.splitlines()))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, items: dict | Iterable[str]) -> "RunConfig":
        if not isinstance(items, dict):
            items = _parse_lines(items)
        types = {f.name: f for f in fields(self)}
        values = {}
        for key, raw in items.items():
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = _coerce(raw, type(getattr(self, key)))
        return dataclasses.replace(self, **values)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    if typ is bool:
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw.strip()


def _parse_lines(lines: Iterable[str]) -> dict:
    out = {}
    for ln in lines:
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ValueError(f"expected 'key = value', got {ln!r}")
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    cfg = cfg.with_overrides(list(overrides))
    env = os.environ.get("GEOMANCER_SEED")
    if env:
        cfg = dataclasses.replace(cfg, seed=int(env))
    return cfg
