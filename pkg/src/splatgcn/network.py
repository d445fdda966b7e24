"""Gated spatio-temporal graph classifier over splatted heatmaps.

The model embeds joint coordinates and velocities, runs a stack of blocks
(fused-topology graph convolution, visual-context gating, multi-scale
temporal convolution), and classifies the concatenation of pooled graph and
visual features. Rendering enters the graph through `splat_heatmaps`, which
carries the analytic derivative of every pixel w.r.t. the learnable log
base-scale, so the whole loss is finite-difference checkable end to end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DataError, DimensionError
from .render import HeatmapStack, RenderConfig, render_sequence, render_sequence_with_grad
from .skeleton import KinematicSequence, NormalizationParams, SkeletonSequence, compute_velocity, normalize_sequence
from .topology import build_prior_adjacency

MOMENTUM = 0.9
WEIGHT_DECAY = 4e-4
ENCODER_CHANNELS = (8, 16)
LOG_SCALE_RANGE = (-6.0, 0.0)   # keeps exp(log_scale) rasterizable

# test hook: name -> offset added to that parameter's analytic gradient
GRADIENT_TAMPER: dict[str, float] = {}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    """Architecture knobs; defaults give the desk-scale (toy) network."""

    num_blocks: int = 4
    channels_per_stage: tuple[int, ...] = (8, 16, 32)
    temporal_strides: tuple[int, ...] = (1, 1, 2, 1)
    dilations: tuple[int, ...] = (1, 2, 3, 4)
    num_classes: int = 2
    visual_dim: int = 16
    beta_init: float = 0.5
    physical_edges: tuple[tuple[int, int], ...] | None = None  # None -> chain graph
    subsets: int = 3
    include_physical: bool = True
    gate_enabled: bool = True    # visual-context gating switch
    prior_enabled: bool = True   # statistical-prior switch (also gates the topology loss)

    def __post_init__(self):
        if self.num_blocks < len(self.channels_per_stage):
            raise ConfigError(
                f"{self.num_blocks} blocks cannot cover {len(self.channels_per_stage)} stages")
        if len(self.temporal_strides) != self.num_blocks:
            raise ConfigError(
                f"temporal_strides has {len(self.temporal_strides)} entries for "
                f"{self.num_blocks} blocks")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.subsets not in (1, 3):
            raise ConfigError(f"subsets must be 1 or 3, got {self.subsets}")

    def block_channels(self) -> list[int]:
        """Per-block output channels: contiguous stages, earlier stages longer."""
        stages = list(self.channels_per_stage)
        base, rem = divmod(self.num_blocks, len(stages))
        widths = []
        for i, ch in enumerate(stages):
            widths.extend([ch] * (base + (1 if i < rem else 0)))
        return widths

    @staticmethod
    def paper_scale(num_classes: int) -> "ModelConfig":
        """Full-size configuration (10 blocks, 64/128/256, strides at 5 and 8)."""
        return ModelConfig(
            num_blocks=10,
            channels_per_stage=(64, 128, 256),
            temporal_strides=(1, 1, 1, 1, 2, 1, 1, 2, 1, 1),
            num_classes=num_classes,
            visual_dim=128,
        )


@dataclass
class LossConfig:
    """Loss weighting and learning-rate schedule constants."""

    lambda_base: float = 0.2
    lambda_ramp_epochs: int = 5
    lr_base: float = 0.05
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (40, 60)
    decay_factor: float = 0.1

    def __post_init__(self):
        for name in ("lambda_base", "lambda_ramp_epochs", "lr_base",
                     "warmup_epochs", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")


def lambda_schedule(epoch: int, cfg: LossConfig) -> float:
    """Topology-loss weight: linear ramp to lambda_base over the first epochs."""
    return cfg.lambda_base * min(1.0, epoch / cfg.lambda_ramp_epochs)


def lr_schedule(epoch: int, cfg: LossConfig) -> float:
    """Linear warmup from zero, then stepwise decay at the configured epochs."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr_base * epoch / cfg.warmup_epochs
    lr = cfg.lr_base
    for boundary in cfg.decay_epochs:
        if epoch >= boundary:
            lr *= cfg.decay_factor
    return lr


# ---------------------------------------------------------------------------
# physical topology
# ---------------------------------------------------------------------------

def chain_edges(num_joints: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, i + 1) for i in range(num_joints - 1))


def build_physical_subsets(num_joints: int, edges, subsets: int,
                           center: int = 0) -> np.ndarray:
    """0/1 adjacency (with self-loops) split into aggregation subsets.

    With three subsets the split is the conventional spatial partition:
    self (plus same-distance neighbors), neighbors nearer the center joint,
    neighbors farther from it.
    """
    edges = tuple(tuple(e) for e in edges)
    for i, j in edges:
        if not (0 <= i < num_joints and 0 <= j < num_joints) or i == j:
            raise ConfigError(f"edge ({i}, {j}) invalid for V={num_joints}")
    if subsets == 1:
        full = np.eye(num_joints)
        for i, j in edges:
            full[i, j] = full[j, i] = 1.0
        return full[None]
    # BFS hop count from the center joint; unreachable joints compare equal
    neighbors = [[] for _ in range(num_joints)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    hops = np.full(num_joints, np.inf)
    hops[center] = 0
    frontier = [center]
    while frontier:
        nxt = []
        for u in frontier:
            for w in neighbors[u]:
                if np.isinf(hops[w]):
                    hops[w] = hops[u] + 1
                    nxt.append(w)
        frontier = nxt
    a_self = np.eye(num_joints)
    a_in = np.zeros((num_joints, num_joints))
    a_out = np.zeros((num_joints, num_joints))
    for i, j in edges:
        for u, w in ((i, j), (j, i)):
            if hops[w] < hops[u]:
                a_in[u, w] = 1.0
            elif hops[w] > hops[u]:
                a_out[u, w] = 1.0
            else:
                a_self[u, w] = 1.0
    return np.stack([a_self, a_in, a_out])


def normalize_rows(subsets: np.ndarray) -> np.ndarray:
    """Degree-normalize each subset so aggregation cannot amplify feature scale."""
    sums = subsets.sum(axis=-1, keepdims=True)
    return subsets / np.where(sums > 0, sums, 1.0)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class ChannelLinear:
    """1x1 channel transform for (N, C, A, B) tensors."""

    def __init__(self, c_in, c_out, name, rng, params, bias=True):
        self.w = Parameter(_he(rng, (c_in, c_out), c_in), f"{name}.w")
        params.append(self.w)
        self.b = None
        if bias:
            self.b = Parameter(np.zeros(c_out), f"{name}.b")
            params.append(self.b)

    def __call__(self, x):
        return ad.channel_map(x, self.w, self.b)


class TimeConv:
    def __init__(self, c_in, c_out, kernel, name, rng, params, bias=True):
        self.w = Parameter(_he(rng, (c_out, c_in, kernel), c_in * kernel), f"{name}.w")
        params.append(self.w)
        self.b = None
        if bias:
            self.b = Parameter(np.zeros(c_out), f"{name}.b")
            params.append(self.b)

    def __call__(self, x, stride=1, dilation=1):
        return ad.time_conv(x, self.w, self.b, stride=stride, dilation=dilation)


class Conv2d:
    def __init__(self, c_in, c_out, kernel, name, rng, params, bias=True):
        fan = c_in * kernel * kernel
        self.w = Parameter(_he(rng, (c_out, c_in, kernel, kernel), fan), f"{name}.w")
        params.append(self.w)
        self.b = None
        if bias:
            self.b = Parameter(np.zeros(c_out), f"{name}.b")
            params.append(self.b)

    def __call__(self, x, stride=1, padding=0):
        return ad.conv2d(x, self.w, self.b, stride=stride, padding=padding)


class Linear:
    def __init__(self, f_in, f_out, name, rng, params):
        self.w = Parameter(_he(rng, (f_in, f_out), f_in), f"{name}.w")
        self.b = Parameter(np.zeros(f_out), f"{name}.b")
        params.extend([self.w, self.b])

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class BatchNorm:
    def __init__(self, channels, name, params, batchnorms):
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        params.extend([self.gamma, self.beta])
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = 0.1
        self.name = name
        batchnorms.append(self)

    def __call__(self, x, training, update_running=True):
        return ad.batchnorm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training, momentum=self.momentum,
                            update_running=update_running)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------

def pool_time(f_vis: Tensor, t_out: int) -> Tensor:
    """Average contiguous frame groups so the visual track matches a strided block."""
    n, c, t = f_vis.values.shape
    if t == t_out:
        return f_vis
    if t % t_out:
        raise DimensionError(f"cannot pool visual length {t} to {t_out} evenly")
    return ad.mean(ad.reshape(f_vis, (n, c, t_out, t // t_out)), axis=3)


def visual_gate(y_gcn: Tensor, gate_features: Tensor, w_g: Parameter,
                b_g: Parameter, y_res: Tensor) -> Tensor:
    """Multiply graph features by (1 + sigmoid(projection)) and add the residual.

    The multiplier is strictly inside (1, 2) and is shared by every joint of
    a frame.
    """
    n, c, t = gate_features.values.shape
    proj = ad.channel_map(ad.reshape(gate_features, (n, c, t, 1)), w_g, b_g)
    if proj.values.shape[1] != y_gcn.values.shape[1]:
        raise DimensionError(
            f"gate projects to {proj.values.shape[1]} channels but features have "
            f"{y_gcn.values.shape[1]}")
    gate = ad.sigmoid(proj)                              # (N, C_out, T, 1)
    return ad.add(ad.mul(y_gcn, ad.add(gate, 1.0)), y_res)


def graph_conv_fused(x: Tensor, a_phy: np.ndarray | None, a_learn, beta: Parameter,
                     a_prior: Tensor | None, weights) -> Tensor:
    """Per-subset aggregation with the fused physical/learned/statistical topology."""
    out = None
    for j, w in enumerate(weights):
        adj = a_learn[j]
        if a_phy is not None:
            adj = ad.add(adj, Tensor(a_phy[j]))
        if a_prior is not None:
            adj = ad.add(adj, ad.mul(beta, a_prior))
        term = ad.channel_map(ad.node_mix(x, adj), w)
        out = term if out is None else ad.add(out, term)
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class VisualEncoder:
    """Two stride-2 convolutions, spatial pooling, and a linear projection."""

    def __init__(self, num_views, visual_dim, rng, params, batchnorms):
        c1, c2 = ENCODER_CHANNELS
        self.conv1 = Conv2d(num_views, c1, 3, "encoder.conv1", rng, params, bias=False)
        self.bn1 = BatchNorm(c1, "encoder.bn1", params, batchnorms)
        self.conv2 = Conv2d(c1, c2, 3, "encoder.conv2", rng, params, bias=False)
        self.bn2 = BatchNorm(c2, "encoder.bn2", params, batchnorms)
        self.proj = Linear(c2, visual_dim, "encoder.proj", rng, params)
        self.visual_dim = visual_dim

    def __call__(self, heat: Tensor, training: bool, update_bn: bool = True) -> Tensor:
        n, views, t, h, w = heat.values.shape
        if h < 8 or w < 8:
            raise ConfigError(f"resolution {h}x{w} too small for two stride-2 stages")
        x = ad.reshape(ad.transpose(heat, (0, 2, 1, 3, 4)), (n * t, views, h, w))
        x = ad.relu(self.bn1(self.conv1(x, stride=2, padding=1), training, update_bn))
        x = ad.relu(self.bn2(self.conv2(x, stride=2, padding=1), training, update_bn))
        x = ad.global_avg_pool(x, (2, 3))                  # (N*T, C2)
        x = self.proj(x)                                   # (N*T, C')
        return ad.transpose(ad.reshape(x, (n, t, self.visual_dim)), (0, 2, 1))


class GCNBlock:
    def __init__(self, idx, c_in, c_out, num_joints, stride, cfg: ModelConfig,
                 rng, params, batchnorms):
        name = f"block{idx}"
        self.stride = stride
        self.a_learn = [Parameter(np.zeros((num_joints, num_joints)), f"{name}.a_learn{j}")
                        for j in range(cfg.subsets)]
        params.extend(self.a_learn)
        beta0 = cfg.beta_init if cfg.prior_enabled else 0.0
        self.beta = Parameter(np.float64(beta0), f"{name}.beta")
        params.append(self.beta)
        self.w_spatial = [ChannelLinear(c_in, c_out, f"{name}.w{j}", rng, params, bias=False)
                          for j in range(cfg.subsets)]
        self.residual = None
        if c_in != c_out:
            self.residual = ChannelLinear(c_in, c_out, f"{name}.res", rng, params, bias=False)
        self.w_g = Parameter(_he(rng, (cfg.visual_dim, c_out), cfg.visual_dim), f"{name}.gate.w")
        self.b_g = Parameter(np.zeros(c_out), f"{name}.gate.b")
        params.extend([self.w_g, self.b_g])
        self.branches = []
        for d in cfg.dilations:
            lin = ChannelLinear(c_out, c_out, f"{name}.tcn{d}.lin", rng, params, bias=False)
            bn = BatchNorm(c_out, f"{name}.tcn{d}.bn", params, batchnorms)
            conv = TimeConv(c_out, c_out, 3, f"{name}.tcn{d}.conv", rng, params, bias=False)
            self.branches.append((lin, bn, conv, d))
        self.down = None
        if stride > 1:
            self.down = TimeConv(c_out, c_out, 1, f"{name}.down", rng, params, bias=False)
        # block-end normalization keeps feature scale flat across the stack
        self.bn_out = BatchNorm(c_out, f"{name}.bn_out", params, batchnorms)
        self.cfg = cfg

    def learned_topology(self) -> Tensor:
        """Subset-summed learned adjacency, as a graph node."""
        snap = self.a_learn[0]
        for extra in self.a_learn[1:]:
            snap = ad.add(snap, extra)
        return snap

    def temporal_stage(self, y: Tensor, training: bool, update_bn: bool = True) -> Tensor:
        """Parallel dilated branches summed with the (stride-matched) residual."""
        out = None
        for lin, bn, conv, dilation in self.branches:
            h = conv(ad.relu(bn(lin(y), training, update_bn)),
                     stride=self.stride, dilation=dilation)
            out = h if out is None else ad.add(out, h)
        res = self.down(y, stride=self.stride) if self.down is not None else y
        return ad.add(out, res)

    def __call__(self, x: Tensor, f_vis: Tensor, a_phy: np.ndarray | None,
                 a_prior: Tensor | None, training: bool, update_bn: bool) -> Tensor:
        weights = [lin.w for lin in self.w_spatial]
        y = graph_conv_fused(x, a_phy, self.a_learn, self.beta, a_prior, weights)
        y_res = self.residual(x) if self.residual is not None else x
        if self.cfg.gate_enabled:
            pooled = pool_time(f_vis, x.values.shape[2])
            y = visual_gate(y, pooled, self.w_g, self.b_g, y_res)
        else:
            y = ad.add(y, y_res)
        y = self.temporal_stage(y, training, update_bn)
        return ad.relu(self.bn_out(y, training, update_bn))


class SplatGCN:
    """Complete classifier plus its learnable rendering scale."""

    def __init__(self, cfg: ModelConfig, num_joints: int, coord_channels: int,
                 render_cfg: RenderConfig, seed: int = 0):
        if coord_channels not in (2, 3):
            raise ConfigError(f"coordinate channels must be 2 or 3, got {coord_channels}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.render_cfg = render_cfg
        self.num_joints = num_joints
        self.coord_channels = coord_channels
        self.num_views = len(render_cfg.views_for(coord_channels))
        self.params: list[Parameter] = []
        self.batchnorms: list[BatchNorm] = []
        self.log_scale = Parameter(np.float64(render_cfg.log_scale), "log_scale")
        self.params.append(self.log_scale)
        self.encoder = VisualEncoder(self.num_views, cfg.visual_dim, rng,
                                     self.params, self.batchnorms)
        widths = cfg.block_channels()
        self.embed = ChannelLinear(coord_channels, widths[0], "embed", rng, self.params, bias=False)
        self.embed_bn = BatchNorm(widths[0], "embed.bn", self.params, self.batchnorms)
        edges = cfg.physical_edges if cfg.physical_edges is not None else chain_edges(num_joints)
        self.a_phy = normalize_rows(build_physical_subsets(num_joints, edges, cfg.subsets)) \
            if cfg.include_physical else None
        self.blocks = []
        c_prev = widths[0]
        for i, (c_out, stride) in enumerate(zip(widths, cfg.temporal_strides)):
            self.blocks.append(GCNBlock(i, c_prev, c_out, num_joints, stride, cfg,
                                        rng, self.params, self.batchnorms))
            c_prev = c_out
        self.head = Linear(c_prev + cfg.visual_dim, cfg.num_classes, "head", rng, self.params)
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names")

    def forward(self, coords, heatmaps: Tensor, priors: np.ndarray,
                training: bool, update_bn: bool = True):
        """Logits for a batch plus the per-block learned-topology snapshots.

        coords: (N, C, T, V) joint coordinates.
        heatmaps: (N, views, T, H, W) tensor (differentiable or constant).
        priors: (N, V, V) per-sample statistical adjacency, treated as data.
        """
        x = coords if isinstance(coords, Tensor) else Tensor(coords)
        f_vis = self.encoder(heatmaps, training, update_bn)
        x = ad.relu(self.embed_bn(self.embed(x), training, update_bn))
        a_prior_t = Tensor(priors) if self.cfg.prior_enabled else None
        snapshots = []
        for block in self.blocks:
            snapshots.append(block.learned_topology())
            x = block(x, f_vis, self.a_phy, a_prior_t, training, update_bn)
        feat = ad.global_avg_pool(x, (2, 3))
        vis = ad.global_avg_pool(f_vis, (2,))
        logits = self.head(ad.concatenate([feat, vis], axis=1))
        return logits, snapshots

    # -- persistence ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {}
        for bn in self.batchnorms:
            state[f"{bn.name}.running_mean"] = bn.running_mean
            state[f"{bn.name}.running_var"] = bn.running_var
        return state

    def load_state(self, params: dict, momenta: dict, state: dict) -> None:
        by_name = {p.name: p for p in self.params}
        for name, values in params.items():
            if name not in by_name:
                raise ConfigError(f"checkpoint parameter {name!r} unknown to this model")
            if by_name[name].values.shape != values.shape:
                raise DimensionError(
                    f"checkpoint {name}: shape {values.shape} vs model {by_name[name].values.shape}")
            by_name[name].values[...] = values
        for name, values in momenta.items():
            if name in by_name:
                by_name[name].momentum[...] = values
        for bn in self.batchnorms:
            if f"{bn.name}.running_mean" in state:
                bn.running_mean[...] = state[f"{bn.name}.running_mean"]
                bn.running_var[...] = state[f"{bn.name}.running_var"]


# ---------------------------------------------------------------------------
# data records and batching
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """One training sample: kinematics, its initial render, prior, label."""

    kin: KinematicSequence
    heatmaps: HeatmapStack
    prior: np.ndarray
    label: int


def prepare_records(sequences, render_cfg: RenderConfig,
                    norm: NormalizationParams | None = None) -> list[SampleRecord]:
    """Normalize, differentiate, render, and attach the statistical prior."""
    records = []
    for i, seq in enumerate(sequences):
        if seq.label is None:
            raise DataError(f"sequence {i} has no label")
        kin = compute_velocity(normalize_sequence(seq, norm))
        stack, grids = render_sequence(kin, render_cfg, source=f"sample{i}")
        prior = build_prior_adjacency(grids, source=f"sample{i}")
        records.append(SampleRecord(kin=kin, heatmaps=stack,
                                    prior=prior.matrix, label=seq.label))
    shapes = {r.kin.positions.shape for r in records}
    if len(shapes) > 1:
        raise DimensionError(f"records must share one (T, V, C) shape, got {sorted(shapes)}")
    return records


def coords_array(kin: KinematicSequence) -> np.ndarray:
    """(C, T, V) joint coordinates; velocities reach the model only through rendering."""
    return np.ascontiguousarray(kin.positions.transpose(2, 0, 1))


def _assemble(records, indices):
    coords = np.stack([coords_array(records[i].kin) for i in indices])
    kins = [records[i].kin for i in indices]
    priors = np.stack([records[i].prior for i in indices])
    labels = np.array([records[i].label for i in indices], dtype=np.int64)
    return coords, kins, priors, labels


def splat_heatmaps(log_scale: Parameter, kins, render_cfg: RenderConfig) -> Tensor:
    """Render a batch at the current log-scale; gradients flow to log_scale only."""
    cfg = replace(render_cfg, log_scale=float(log_scale.values))
    values, derivs = [], []
    for kin in kins:
        stack, _, grad = render_sequence_with_grad(kin, cfg)
        values.append(stack.values)
        derivs.append(grad)
    values = np.stack(values)
    derivs = np.stack(derivs)

    def bwd(g):
        ad.accumulate(log_scale, np.asarray(np.sum(g * derivs)))

    return Tensor(values, (log_scale,), bwd)


# ---------------------------------------------------------------------------
# loss and training
# ---------------------------------------------------------------------------

def compute_loss(logits: Tensor, labels, learn_snapshots, prior_target: np.ndarray,
                 epoch: int, loss_cfg: LossConfig, topo_enabled: bool):
    """Cross-entropy plus the ramped topology-consistency penalty.

    Returns (total, ce_value, topo_value, lambda). The prior target is a
    constant pseudo label; no gradient reaches it.
    """
    ce = ad.cross_entropy_with_softmax(logits, labels)
    lam = lambda_schedule(epoch, loss_cfg)
    if not topo_enabled or not learn_snapshots:
        return ce, float(ce.values), 0.0, lam
    target = Tensor(prior_target)
    acc = None
    for snap in learn_snapshots:
        diff = ad.add(ad.sigmoid(snap), ad.mul(target, -1.0))
        term = ad.tensor_sum(ad.mul(diff, diff))
        acc = term if acc is None else ad.add(acc, term)
    topo = ad.mul(acc, 1.0 / len(learn_snapshots))
    total = ad.add(ce, ad.mul(topo, lam))
    return total, float(ce.values), float(topo.values), lam


def train_epoch(model: SplatGCN, records, loss_cfg: LossConfig, epoch: int,
                batch_size: int = 8, seed: int = 0) -> dict:
    """One shuffled pass of forward/loss/backward/update; deterministic per seed."""
    if not records:
        raise ConfigError("training requires a non-empty dataset")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(records))
    lr = lr_schedule(epoch, loss_cfg)
    lam = lambda_schedule(epoch, loss_cfg)
    total_sum = ce_sum = topo_sum = 0.0
    correct = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        coords, kins, priors, labels = _assemble(records, idx)
        for p in model.params:
            p.zero_grad()
        heat = splat_heatmaps(model.log_scale, kins, model.render_cfg)
        logits, snapshots = model.forward(coords, heat, priors, training=True)
        total, ce_v, topo_v, _ = compute_loss(
            logits, labels, snapshots, priors.mean(axis=0), epoch, loss_cfg,
            model.cfg.prior_enabled)
        ad.backward(total)
        if lr > 0.0:  # a zero-lr epoch must leave parameters bit-identical
            ad.sgd_step(model.params, lr, MOMENTUM, WEIGHT_DECAY, nesterov=True)
            np.clip(model.log_scale.values, *LOG_SCALE_RANGE,
                    out=model.log_scale.values)
        n = len(idx)
        total_sum += float(total.values) * n
        ce_sum += ce_v * n
        topo_sum += topo_v * n
        correct += int((np.argmax(logits.values, axis=1) == labels).sum())
    count = len(records)
    return {
        "epoch": epoch,
        "lr": lr,
        "lambda": lam,
        "loss": total_sum / count,
        "loss_ce": ce_sum / count,
        "loss_topo": topo_sum / count,
        "accuracy": correct / count,
    }


def fit(model: SplatGCN, records, loss_cfg: LossConfig, epochs: int,
        batch_size: int = 8, seed: int = 0, start_epoch: int = 0,
        on_epoch=None) -> list[dict]:
    rows = []
    for epoch in range(start_epoch, epochs):
        metrics = train_epoch(model, records, loss_cfg, epoch, batch_size, seed)
        rows.append(metrics)
        if on_epoch is not None:
            on_epoch(epoch, metrics)
    if rows:
        recalibrate_bn(model, records, batch_size=max(batch_size, 16))
    return rows


def recalibrate_bn(model: SplatGCN, records, batch_size: int = 32) -> None:
    """Replace BN running statistics with uniform averages over the dataset.

    Small-batch EMA statistics drift during short trainings; a single
    deterministic sweep with per-step momentum 1/k leaves each buffer at the
    plain mean of the per-batch statistics.
    """
    if not records:
        raise ConfigError("recalibration requires a non-empty dataset")
    cfg = replace(model.render_cfg, log_scale=float(model.log_scale.values))
    for step, start in enumerate(range(0, len(records), batch_size)):
        idx = range(start, min(start + batch_size, len(records)))
        coords, kins, priors, _ = _assemble(records, idx)
        for bn in model.batchnorms:
            bn.momentum = 1.0 / (step + 1)
        heat = Tensor(np.stack([render_sequence(kin, cfg)[0].values for kin in kins]))
        model.forward(coords, heat, priors, training=True, update_bn=True)
    for bn in model.batchnorms:
        bn.momentum = 0.1


def evaluate(model: SplatGCN, records, batch_size: int = 32) -> float:
    """Top-1 accuracy with frozen statistics and the current log-scale."""
    if not records:
        raise ConfigError("evaluation requires a non-empty dataset")
    cfg = replace(model.render_cfg, log_scale=float(model.log_scale.values))
    correct = 0
    for start in range(0, len(records), batch_size):
        idx = range(start, min(start + batch_size, len(records)))
        coords, kins, priors, labels = _assemble(records, idx)
        heat = Tensor(np.stack([render_sequence(kin, cfg)[0].values for kin in kins]))
        logits, _ = model.forward(coords, heat, priors, training=False, update_bn=False)
        correct += int((np.argmax(logits.values, axis=1) == labels).sum())
    return correct / len(records)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def run_gradient_check(model: SplatGCN, records, loss_cfg: LossConfig,
                       epoch: int = 6, samples_per_param: int = 8,
                       step: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients,
    per named parameter. Sampled elements per parameter keep this tractable."""
    coords, kins, priors, labels = _assemble(records, range(len(records)))
    prior_target = priors.mean(axis=0)

    def forward_loss() -> Tensor:
        heat = splat_heatmaps(model.log_scale, kins, model.render_cfg)
        logits, snapshots = model.forward(coords, heat, priors,
                                          training=True, update_bn=False)
        total, _, _, _ = compute_loss(logits, labels, snapshots, prior_target,
                                      epoch, loss_cfg, model.cfg.prior_enabled)
        return total

    for p in model.params:
        p.zero_grad()
    ad.backward(forward_loss())
    analytic = {p.name: p.grad.copy() for p in model.params}
    for name, delta in GRADIENT_TAMPER.items():
        if name in analytic:
            analytic[name] = analytic[name] + delta
    rng = np.random.default_rng(seed)
    report = {}
    for p in model.params:
        flat = p.values.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_param, flat.size),
                           replace=False)
        worst = 0.0
        for i in picks:
            saved = flat[i]
            flat[i] = saved + step
            f_plus = float(forward_loss().values)
            flat[i] = saved - step
            f_minus = float(forward_loss().values)
            flat[i] = saved
            fd = (f_plus - f_minus) / (2.0 * step)
            an = analytic[p.name].reshape(-1)[i]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
        report[p.name] = worst
    return report
