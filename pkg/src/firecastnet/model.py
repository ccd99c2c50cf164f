"""FireCastNet and the recurrent baseline cells.

FireCastNet runs cube embedding, grid-to-mesh encoding, mesh message passing,
mesh-to-grid decoding and a pixel-shuffle head.  The output is a per-pixel logit
map; sigmoid is applied only when reporting probabilities.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tn
from .coupling import (
    GRID_TO_MESH,
    MESH_TO_GRID,
    CouplingGraph,
    GridSpec,
    grid_to_mesh_edges,
    mesh_to_grid_edges,
)
from .geomesh import MultiMesh
from .tensor import Tensor

ALLOWED_TS = (6, 12, 24)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class FireCastNetConfig:
    ts: int = 24
    in_channels: int = 14
    embed_channels: int = 64
    spatial_reduction: int = 4
    mesh_hidden: int = 64
    processor_layers: int = 12
    mesh_node_in: int = 3
    mesh_edge_in: int = 4
    mesh_level: int = 6
    g2m_radius_factor: float = 0.6

    @property
    def decoder_out_channels(self) -> int:
        return self.spatial_reduction**2

    def validate(self) -> None:
        if self.ts < 1 or self.spatial_reduction < 1 or self.processor_layers < 0:
            raise ModelError(f"invalid config {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FireCastNetConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter registry


def _mlp_shapes(prefix: str, n_in: int, hidden: int, n_out: int, norm: bool = True):
    shapes = [
        (f"{prefix}.w1", (n_in, hidden)),
        (f"{prefix}.b1", (hidden,)),
        (f"{prefix}.w2", (hidden, n_out)),
        (f"{prefix}.b2", (n_out,)),
    ]
    if norm:
        shapes += [(f"{prefix}.ln_g", (n_out,)), (f"{prefix}.ln_b", (n_out,))]
    return shapes


def firecastnet_shapes(cfg: FireCastNetConfig) -> list[tuple[str, tuple]]:
    r = cfg.spatial_reduction
    c, ce, h = cfg.in_channels, cfg.embed_channels, cfg.mesh_hidden
    ei = cfg.mesh_edge_in
    shapes = [
        ("embed.w", (ce, c, cfg.ts, r, r)),
        ("embed.b", (ce,)),
        ("embed.ln_g", (ce,)),
        ("embed.ln_b", (ce,)),
    ]
    shapes += _mlp_shapes("mesh_node_embed", cfg.mesh_node_in, h, h)
    shapes += _mlp_shapes("enc_edge", ce + h + ei, h, h)
    shapes += _mlp_shapes("enc_node", 2 * h, h, h)
    shapes += _mlp_shapes("mesh_edge_embed", ei, h, h)
    for layer in range(cfg.processor_layers):
        shapes += _mlp_shapes(f"proc{layer}.edge", 3 * h, h, h)
        shapes += _mlp_shapes(f"proc{layer}.node", 2 * h, h, h)
    shapes += _mlp_shapes("dec_edge", h + ei, h, h)
    shapes += _mlp_shapes("dec_node", ce + h, h, cfg.decoder_out_channels, norm=False)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith("embed.w") or len(shape) >= 4:
        return int(np.prod(shape[1:]))
    return int(shape[0])


@dataclass
class ModelState:
    """Named parameters in registry order plus what produced them."""

    config: object
    seed: int
    params: dict = field(default_factory=dict)
    kind: str = "firecastnet"

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelState":
        params = {
            k: tn.Tensor(v.data.copy(), requires_grad=True, name=k, dtype=v.dtype)
            for k, v in self.params.items()
        }
        return ModelState(self.config, self.seed, params, self.kind)

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in self.params.values())


def init_from_shapes(shapes, seed: int, scheme: str = "uniform", dtype=None) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains.

    Parameters are drawn in registry order from one generator, so the result
    depends on the seed only.
    """
    rng = np.random.default_rng(seed)
    dtype = dtype or tn.default_dtype()
    params = {}
    for name, shape in shapes:
        leaf = name.rsplit(".", 1)[-1]
        if scheme == "zeros":
            value = np.zeros(shape)
        elif leaf == "ln_g":
            value = np.ones(shape)
        elif leaf.startswith("b") or leaf == "ln_b":
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = tn.Tensor(value, requires_grad=True, name=name, dtype=dtype)
    return params


def init_parameters(cfg: FireCastNetConfig, seed: int = 0, scheme: str = "uniform") -> ModelState:
    cfg.validate()
    return ModelState(cfg, seed, init_from_shapes(firecastnet_shapes(cfg), seed, scheme))


# ---------------------------------------------------------------------------
# graphs


@dataclass(frozen=True)
class MeshGraphs:
    """Everything the network needs about geometry, precomputed once."""

    grid: GridSpec  # full-resolution input grid
    latent_grid: GridSpec  # grid after cube embedding
    mesh: MultiMesh
    g2m: CouplingGraph
    m2g: CouplingGraph
    mesh_senders: np.ndarray
    mesh_receivers: np.ndarray
    mesh_edge_features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.mesh.num_nodes


def prepare_graphs(
    mesh: MultiMesh,
    grid: GridSpec,
    cfg: FireCastNetConfig,
    g2m: Optional[CouplingGraph] = None,
    m2g: Optional[CouplingGraph] = None,
) -> MeshGraphs:
    latent = grid.coarsen(cfg.spatial_reduction)
    if g2m is None or g2m.grid != latent:
        g2m = grid_to_mesh_edges(latent, mesh, cfg.g2m_radius_factor)
    if m2g is None or m2g.grid != latent:
        m2g = mesh_to_grid_edges(latent, mesh)
    if g2m.direction != GRID_TO_MESH or m2g.direction != MESH_TO_GRID:
        raise ModelError("coupling graphs have the wrong direction")
    s, r, f = mesh.directed_edges()
    return MeshGraphs(grid, latent, mesh, g2m, m2g, s, r, f)


# ---------------------------------------------------------------------------
# building blocks


def mlp(params: dict, prefix: str, x, norm: bool = True) -> Tensor:
    h = tn.silu(tn.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    y = tn.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    if norm:
        y = tn.layer_norm(y, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    return y


def _split_first_layer(params: dict, prefix: str, parts, norm: bool = True) -> Tensor:
    """MLP over concat(parts) without materialising the concatenation.

    ``parts`` is a list of (node_table, index or None).  The first layer's
    weight is sliced by row blocks; each block multiplies its (small) node
    table before rows are gathered per edge.  Mathematically identical to
    ``mlp(concat([table[index] ...]))``.
    """
    w1 = params[f"{prefix}.w1"]
    start = 0
    pre = None
    for table, index in parts:
        width = table.shape[1]
        block = tn.take_rows(w1, start, start + width)
        start += width
        proj = tn.matmul(table, block)
        if index is not None:
            proj = tn.gather(proj, index)
        pre = proj if pre is None else tn.add(pre, proj)
    if start != w1.shape[0]:
        raise ModelError(f"{prefix}: input width {start} != weight rows {w1.shape[0]}")
    h = tn.silu(tn.add(pre, params[f"{prefix}.b1"]))
    y = tn.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    if norm:
        y = tn.layer_norm(y, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    return y


def _check_input(x: Tensor, cfg: FireCastNetConfig):
    if x.ndim != 4:
        raise ModelError(f"expected input [T, C, H, W], got {x.shape}")
    t, c, h, w = x.shape
    r = cfg.spatial_reduction
    if t != cfg.ts or c != cfg.in_channels:
        raise ModelError(f"input {x.shape} does not match ts={cfg.ts}, C={cfg.in_channels}")
    if h % r or w % r:
        raise ModelError(f"grid {h}x{w} not divisible by {r}")


def _embed_cells(x, state: ModelState) -> Tensor:
    """Cube embedding flattened to [H'*W', C'] (row-major cells)."""
    cfg = state.config
    p = state.params
    r = cfg.spatial_reduction
    y = tn.conv3d(x, p["embed.w"], p["embed.b"], (cfg.ts, r, r))
    ce, hh, ww = y.shape
    cells = tn.reshape(tn.transpose(y, (1, 2, 0)), (hh * ww, ce))
    return tn.layer_norm(cells, p["embed.ln_g"], p["embed.ln_b"])


def cube_embed(x, state: ModelState) -> Tensor:
    """[T, C, H, W] -> [C', H/r, W/r]: strided 3-D conv then channel layer norm."""
    x = tn.as_tensor(x)
    cfg = state.config
    _check_input(x, cfg)
    r = cfg.spatial_reduction
    cells = _embed_cells(x, state)
    hh, ww = x.shape[2] // r, x.shape[3] // r
    return tn.transpose(tn.reshape(cells, (hh, ww, cfg.embed_channels)), (2, 0, 1))


def encode_grid_to_mesh(grid_cells, graphs: MeshGraphs, state: ModelState) -> Tensor:
    """Grid features [N_cells, C'] -> initial mesh node states [V, C_mesh]."""
    p = state.params
    g2m = graphs.g2m
    if grid_cells.shape[0] != g2m.grid.num_cells:
        raise ModelError("grid features do not match the grid-to-mesh graph")
    v = graphs.num_nodes
    node_emb = mlp(p, "mesh_node_embed", tn.Tensor(graphs.mesh.node_features))
    efeat = tn.Tensor(g2m.edge_features)
    msg = _split_first_layer(
        p,
        "enc_edge",
        [(grid_cells, g2m.senders), (node_emb, g2m.receivers), (efeat, None)],
    )
    agg = tn.scatter_sum(msg, g2m.receivers, v)
    return _split_first_layer(p, "enc_node", [(node_emb, None), (agg, None)])


def process_mesh(h, graphs: MeshGraphs, state: ModelState) -> Tensor:
    """Residual message passing over the multi-mesh, ``processor_layers`` times.

    Edge latents start from an embedding of the edge geometry and persist
    across layers with residual updates.
    """
    p = state.params
    cfg = state.config
    if h.shape[0] != graphs.num_nodes:
        raise ModelError("node state count does not match the mesh")
    if cfg.processor_layers == 0:
        return h
    s, r = graphs.mesh_senders, graphs.mesh_receivers
    v = graphs.num_nodes
    e = mlp(p, "mesh_edge_embed", tn.Tensor(graphs.mesh_edge_features))
    for layer in range(cfg.processor_layers):
        e_new = _split_first_layer(p, f"proc{layer}.edge", [(h, s), (h, r), (e, None)])
        agg = tn.scatter_sum(e_new, r, v)
        h_new = _split_first_layer(p, f"proc{layer}.node", [(h, None), (agg, None)])
        e = tn.add(e, e_new)
        h = tn.add(h, h_new)
    return h


def decode_mesh_to_grid(h, grid_cells, graphs: MeshGraphs, state: ModelState) -> Tensor:
    """Mesh states -> [r*r, H', W'] using 3 messages per cell and the cell's own embedding."""
    p = state.params
    m2g = graphs.m2g
    n = m2g.grid.num_cells
    deg = m2g.in_degree(n)
    if not np.all(deg == 3):
        raise ModelError("mesh-to-grid graph must give every cell exactly 3 edges")
    efeat = tn.Tensor(m2g.edge_features)
    msg = _split_first_layer(p, "dec_edge", [(h, m2g.senders), (efeat, None)])
    agg = tn.scatter_sum(msg, m2g.receivers, n)
    out = _split_first_layer(p, "dec_node", [(grid_cells, None), (agg, None)], norm=False)
    lg = m2g.grid
    return tn.reshape(tn.transpose(out, (1, 0)), (out.shape[1], lg.height, lg.width))


def firecastnet_forward(x, graphs: MeshGraphs, state: ModelState) -> Tensor:
    """[T, C, H, W] -> [H, W] logits."""
    x = tn.as_tensor(x)
    cfg = state.config
    _check_input(x, cfg)
    if (x.shape[2], x.shape[3]) != (graphs.grid.height, graphs.grid.width):
        raise ModelError(f"input grid {x.shape[2:]} does not match graphs {graphs.grid}")
    cells = _embed_cells(x, state)
    h0 = encode_grid_to_mesh(cells, graphs, state)
    h = process_mesh(h0, graphs, state)
    dec = decode_mesh_to_grid(h, cells, graphs, state)
    up = tn.pixel_shuffle(dec, cfg.spatial_reduction)
    return tn.reshape(up, up.shape[1:])


def predict_proba(x, graphs: MeshGraphs, state: ModelState) -> np.ndarray:
    with tn.no_grad():
        logits = firecastnet_forward(x, graphs, state).data
    return tn._sigmoid(np.asarray(logits, dtype=np.float64))


# ---------------------------------------------------------------------------
# recurrent baselines


@dataclass(frozen=True)
class RecurrentConfig:
    kind: str = "convlstm"  # "gru", "convgru" or "convlstm"
    in_channels: int = 14
    hidden: int = 64
    kernel: int = 5
    patch_radius: int = 2
    dropout: float = 0.1

    def validate(self) -> None:
        if self.kind not in ("gru", "convgru", "convlstm"):
            raise ModelError(f"unknown recurrent kind {self.kind!r}")
        if self.kind != "gru" and self.kernel % 2 == 0:
            raise ModelError("kernel size must be odd")

    @property
    def patch(self) -> int:
        return 2 * self.patch_radius + 1 if self.kind != "gru" else 1

    def to_dict(self) -> dict:
        return asdict(self)


GRU_GATES = ("z", "r", "h")
LSTM_GATES = ("i", "f", "o", "g")


def recurrent_shapes(cfg: RecurrentConfig) -> list[tuple[str, tuple]]:
    c, hd, k = cfg.in_channels, cfg.hidden, cfg.kernel
    gates = LSTM_GATES if cfg.kind == "convlstm" else GRU_GATES
    shapes = []
    for g in gates:
        if cfg.kind == "gru":
            shapes += [(f"cell.wx_{g}", (c, hd)), (f"cell.wh_{g}", (hd, hd))]
        else:
            shapes += [(f"cell.wx_{g}", (hd, c, k, k)), (f"cell.wh_{g}", (hd, hd, k, k))]
        shapes.append((f"cell.b_{g}", (hd,)))
    d = hd * cfg.patch**2
    shapes += [
        ("head.w1", (d, max(d // 2, 1))),
        ("head.b1", (max(d // 2, 1),)),
        ("head.w2", (max(d // 2, 1), 1)),
        ("head.b2", (1,)),
    ]
    return shapes


def init_recurrent(cfg: RecurrentConfig, seed: int = 0, scheme: str = "uniform") -> ModelState:
    cfg.validate()
    return ModelState(cfg, seed, init_from_shapes(recurrent_shapes(cfg), seed, scheme), kind=cfg.kind)


def _per_channel(b: Tensor) -> Tensor:
    return tn.reshape(b, (b.shape[0], 1, 1))


def conv_gru_step(x_t, h_prev, params: dict) -> Tensor:
    """One Conv-GRU step; x_t [N, C, P, P], h_prev [N, Hd, P, P].

    z = s(Wxz*x + Whz*h + bz), r = s(Wxr*x + Whr*h + br),
    h~ = tanh(Wxh*x + r . (Whh*h) + bh), h' = (1 - z) . h + z . h~
    """
    p = params
    z = tn.sigmoid(
        tn.conv2d(x_t, p["cell.wx_z"], p["cell.b_z"]) + tn.conv2d(h_prev, p["cell.wh_z"])
    )
    r = tn.sigmoid(
        tn.conv2d(x_t, p["cell.wx_r"], p["cell.b_r"]) + tn.conv2d(h_prev, p["cell.wh_r"])
    )
    cand = tn.tanh(
        tn.conv2d(x_t, p["cell.wx_h"], p["cell.b_h"]) + r * tn.conv2d(h_prev, p["cell.wh_h"])
    )
    return (1.0 - z) * h_prev + z * cand


def conv_lstm_step(x_t, h_prev, c_prev, params: dict) -> tuple[Tensor, Tensor]:
    """One Conv-LSTM step; returns (h_t, c_t) with h_t = o . tanh(c_t)."""
    p = params

    def gate(g, act):
        return act(
            tn.conv2d(x_t, p[f"cell.wx_{g}"], p[f"cell.b_{g}"]) + tn.conv2d(h_prev, p[f"cell.wh_{g}"])
        )

    i = gate("i", tn.sigmoid)
    f = gate("f", tn.sigmoid)
    o = gate("o", tn.sigmoid)
    g = gate("g", tn.tanh)
    c = f * c_prev + i * g
    return o * tn.tanh(c), c


def gru_step(x_t, h_prev, params: dict) -> Tensor:
    """GRU step on vectors: x_t [N, C], h_prev [N, Hd]; same gate equations."""
    p = params
    z = tn.sigmoid(x_t @ p["cell.wx_z"] + h_prev @ p["cell.wh_z"] + p["cell.b_z"])
    r = tn.sigmoid(x_t @ p["cell.wx_r"] + h_prev @ p["cell.wh_r"] + p["cell.b_r"])
    cand = tn.tanh(x_t @ p["cell.wx_h"] + r * (h_prev @ p["cell.wh_h"]) + p["cell.b_h"])
    return (1.0 - z) * h_prev + z * cand


def baseline_head(h_last, params: dict) -> Tensor:
    """Flatten the final hidden state, halve its width, reduce to one logit per item."""
    n = h_last.shape[0]
    flat = tn.reshape(h_last, (n, -1)) if h_last.ndim > 2 else h_last
    if flat.shape[1] != params["head.w1"].shape[0]:
        raise ModelError(f"head expects width {params['head.w1'].shape[0]}, got {flat.shape[1]}")
    mid = tn.relu(tn.linear(flat, params["head.w1"], params["head.b1"]))
    out = tn.linear(mid, params["head.w2"], params["head.b2"])
    return tn.reshape(out, (n,))


def recurrent_forward(x, state: ModelState, training: bool = False, rng=None) -> Tensor:
    """Patch sequences [N, T, C, P, P] (or [N, T, C] for GRU) -> [N] logits."""
    x = tn.as_tensor(x)
    cfg: RecurrentConfig = state.config
    p = state.params
    n, t = x.shape[0], x.shape[1]
    if cfg.kind == "gru":
        h = tn.Tensor(np.zeros((n, cfg.hidden), dtype=x.dtype))
    else:
        size = x.shape[-1]
        h = tn.Tensor(np.zeros((n, cfg.hidden, size, size), dtype=x.dtype))
        c = tn.Tensor(np.zeros_like(h.data))
    for step in range(t):
        xt = _time_slice(x, step)
        if cfg.kind == "gru":
            h = gru_step(xt, h, p)
        elif cfg.kind == "convgru":
            h = conv_gru_step(xt, h, p)
        else:
            h, c = conv_lstm_step(xt, h, c, p)
    h = tn.dropout(h, cfg.dropout, rng, training=training)
    return baseline_head(h, p)


def _time_slice(x: Tensor, step: int) -> Tensor:
    moved = tn.transpose(x, (1, 0) + tuple(range(2, x.ndim)))
    return tn.reshape(tn.take_rows(moved, step, step + 1), moved.shape[1:])


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float32 payload


def save_checkpoint(stem, state: ModelState, epoch: int = 0, extra: Optional[dict] = None) -> tuple[Path, Path]:
    stem = Path(stem)
    registry, offset = [], 0
    for name, t in state.params.items():
        registry.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += int(t.size)
    manifest = {
        "format": "firecastnet-checkpoint/1",
        "kind": state.kind,
        "config": state.config.to_dict(),
        "seed": state.seed,
        "epoch": epoch,
        "dtype": "<f4",
        "parameters": registry,
    }
    if extra:
        manifest.update(extra)
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    bin_path.write_bytes(state.to_bytes())
    return json_path, bin_path


def load_checkpoint(stem) -> tuple[ModelState, dict]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    payload = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4")
    kind = manifest["kind"]
    if kind == "firecastnet":
        cfg = FireCastNetConfig.from_dict(manifest["config"])
    else:
        cfg = RecurrentConfig(**manifest["config"])
    params = {}
    for entry in manifest["parameters"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = payload[entry["offset"] : entry["offset"] + size]
        if len(chunk) != size:
            raise ModelError(f"checkpoint payload truncated at {entry['name']}")
        params[entry["name"]] = tn.Tensor(
            chunk.reshape(entry["shape"]).copy(), requires_grad=True, name=entry["name"]
        )
    return ModelState(cfg, manifest["seed"], params, kind), manifest
