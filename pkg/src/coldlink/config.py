"""Run configuration: a flat key=value file plus CLI overrides.

Every field has a typed default; unknown keys are rejected so typos fail
fast. The resolved config (all defaults made explicit) is written into the
run directory, which makes any report reproducible from that single file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .encoder import EncoderDims
from .meta import MetaConfig
from .synth import SynthSpec


@dataclass
class RunConfig:
    # data source: a CSV path, or the synthetic generator when empty
    dataset: str = ""
    node_features: str = ""
    bipartite: bool = False
    node_feature_dim: int = 1

    synth_communities: int = 4
    synth_nodes_per_community: int = 50
    synth_events_per_node: int = 20
    synth_new_node_fraction: float = 0.3
    synth_noise: float = 0.1
    synth_horizon: float = 1000.0
    synth_edge_dim: int = 4

    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2

    d: int = 64
    d_t: int = 64
    heads: int = 2
    hops: int = 2
    k: int = 8

    lr_meta: float = 0.001
    lr_encoder: float = 0.0002
    lr_predictor: float = 0.025
    inner_steps: int = 1
    span_size: int = 2
    n_support: int = 8
    n_query: int = 8
    batch_size: int = 64
    epochs: int = 30
    patience: int = 0
    max_train_tasks: int = 0     # 0 = no cap; otherwise first k eligible nodes
    train_new_only: bool = False

    no_meta: bool = False
    no_span_adapt: bool = False
    no_node_adapt: bool = False

    seed: int = 0
    threads: int = 1
    per_task_metrics: bool = False

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            lr_meta=self.lr_meta, lr_encoder=self.lr_encoder, lr_predictor=self.lr_predictor,
            inner_steps=self.inner_steps, span_size=self.span_size,
            n_support=self.n_support, n_query=self.n_query,
            batch_size=self.batch_size, epochs=self.epochs, patience=self.patience,
            threads=self.threads, no_meta=self.no_meta,
            no_span_adapt=self.no_span_adapt, no_node_adapt=self.no_node_adapt,
        )

    def encoder_dims(self, d_x: int, d_e: int) -> EncoderDims:
        return EncoderDims(d=self.d, d_t=self.d_t, heads=self.heads, hops=self.hops,
                           k=self.k, d_x=d_x, d_e=d_e)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            num_communities=self.synth_communities,
            nodes_per_community=self.synth_nodes_per_community,
            events_per_node=self.synth_events_per_node,
            new_node_fraction=self.synth_new_node_fraction,
            noise=self.synth_noise,
            horizon=self.synth_horizon,
            d_e=self.synth_edge_dim,
        )

    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELDS[name]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply key=value strings onto a config; unknown keys are an error."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path) -> RunConfig:
    cfg = RunConfig()
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key=value")
            pairs.append(line)
    return apply_overrides(cfg, pairs)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
