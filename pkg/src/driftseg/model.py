"""Two-stream encoder-decoder segmentation network with subtraction fusion.

Two separate conv-BN-ReLU encoders (optionally tied) process the earlier
and later image of a pair; their feature maps are fused by elementwise
subtraction (earlier minus later) at every scale, and a U-Net style
decoder with concatenated difference skips produces per-pixel logits for
the five damage classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore as nc

NUM_CLASSES = 5
STREAMS = ("pre", "post")


@dataclass
class ModelConfig:
    stages: int = 4
    base_width: int = 16
    num_classes: int = NUM_CLASSES
    tied_encoders: bool = False
    input_channels: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def validate(self) -> None:
        if self.num_classes != NUM_CLASSES:
            raise ValueError("num_classes is fixed at 5")
        if self.stages < 2:
            raise ValueError("need at least 2 encoder stages")
        if self.base_width < 1 or self.input_channels < 1:
            raise ValueError("base_width and input_channels must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def stage_widths(self) -> list[int]:
        return [self.base_width * (1 << i) for i in range(self.stages)]

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class Model:
    config: ModelConfig
    store: nc.ParameterStore
    bn_states: dict[str, nc.BNLayerState]
    # declarative layer graph: conv entries are (name, in_ch, out_ch, k, stride, pad),
    # bn entries map layer name -> topological depth level
    topology: dict = field(default_factory=dict)

    def resolve(self, name: str) -> str:
        """Map a layer path to its storage path (post -> pre when tied)."""
        if self.config.tied_encoders and name.startswith("enc/post/"):
            return "enc/pre/" + name[len("enc/post/"):]
        return name

    def bn_layer_names(self) -> list[str]:
        return list(self.bn_states.keys())

    def bn_depth_levels(self) -> list[list[str]]:
        """BN layer names grouped by topological depth, shallowest first."""
        levels: dict[int, list[str]] = {}
        for name, depth in self.topology["bn_depth"].items():
            levels.setdefault(depth, []).append(name)
        return [levels[d] for d in sorted(levels)]

    def parameters(self) -> nc.ParameterStore:
        return self.store

    def state_dict(self) -> dict[str, np.ndarray]:
        """All learnable values plus BN running statistics, by path."""
        out = {name: p.data.copy() for name, p in
               ((n, self.store[n]) for n in self.store.names())}
        for lname, st in self.bn_states.items():
            out[f"{lname}/running_mean"] = st.running_mean.copy()
            out[f"{lname}/running_var"] = st.running_var.copy()
            out[f"{lname}/num_batches_tracked"] = np.asarray(st.num_batches_tracked,
                                                             dtype=np.int64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name in self.store.names():
            self.store[name].data = np.asarray(state[name])
        for lname, st in self.bn_states.items():
            st.running_mean = np.asarray(state[f"{lname}/running_mean"]).copy()
            st.running_var = np.asarray(state[f"{lname}/running_var"]).copy()
            st.num_batches_tracked = int(state[f"{lname}/num_batches_tracked"])


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_two_stream(config: ModelConfig, seed: int) -> Model:
    """Construct the network; weight draws are a pure function of the seed."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dt = config.np_dtype()
    store = nc.ParameterStore()
    bn_states: dict[str, nc.BNLayerState] = {}
    convs: list[tuple[str, int, int, int, int, int]] = []
    bn_depth: dict[str, int] = {}

    def add_conv(name: str, ci: int, co: int, k: int, stride: int = 1, pad: int = 0):
        convs.append((name, ci, co, k, stride, pad))
        store.add(f"{name}/w", _he_uniform(rng, (co, ci, k, k), ci * k * k, dt))
        store.add(f"{name}/b", np.zeros(co, dtype=dt))

    def add_bn(name: str, c: int, depth: int):
        bn_states[name] = nc.BNLayerState(
            gamma=store.add(f"{name}/gamma", np.ones(c, dtype=dt)),
            beta=store.add(f"{name}/beta", np.zeros(c, dtype=dt)),
            running_mean=np.zeros(c, dtype=dt),
            running_var=np.ones(c, dtype=dt),
            momentum=config.bn_momentum,
            eps=config.bn_eps,
        )
        bn_depth[name] = depth

    widths = config.stage_widths
    streams = ("pre",) if config.tied_encoders else STREAMS
    depth = 0
    for i, w in enumerate(widths, start=1):
        ci = config.input_channels if i == 1 else widths[i - 2]
        for s in streams:
            add_conv(f"enc/{s}/s{i}/conv1", ci, w, 3, 1, 1)
            add_bn(f"enc/{s}/s{i}/bn1", w, depth)
        for s in streams:
            add_conv(f"enc/{s}/s{i}/conv2", w, w, 3, 1, 1)
            add_bn(f"enc/{s}/s{i}/bn2", w, depth + 1)
        for s in streams:
            # 2x2 stride-2 kernel halves even H,W exactly (3x3 would need
            # fractional output under the integral-size contract)
            add_conv(f"enc/{s}/s{i}/down", w, w, 2, 2, 0)
            add_bn(f"enc/{s}/s{i}/bn3", w, depth + 2)
        depth += 3
    for i in range(config.stages, 0, -1):
        up_ch = widths[-1] if i == config.stages else widths[i]
        add_conv(f"dec/s{i}/conv", up_ch + widths[i - 1], widths[i - 1], 3, 1, 1)
        add_bn(f"dec/s{i}/bn", widths[i - 1], depth)
        depth += 1
    add_conv("head", widths[0], config.num_classes, 1, 1, 0)

    topology = {
        "stage_widths": widths,
        "convs": convs,
        "bn_depth": bn_depth,
    }
    return Model(config=config, store=store, bn_states=bn_states, topology=topology)


def _check_inputs(model: Model, pre, post):
    cfg = model.config
    for label, t in (("pre", pre), ("post", post)):
        if t.data.ndim != 4 or t.shape[1] != cfg.input_channels:
            raise ValueError(f"{label} images must be N,{cfg.input_channels},H,W")
    if pre.shape != post.shape:
        raise ValueError("pre and post batches must share a shape")
    n, _, h, w = pre.shape
    div = 1 << cfg.stages
    if h % div or w % div:
        raise ValueError(f"H and W must be divisible by 2^stages = {div}, got {h}x{w}")


def forward(model: Model, pre, post, mode: str = "train", overlay=None,
            collect_sink: dict | None = None, fused_sink: dict | None = None):
    """Run the network; returns logits at input resolution.

    mode is forwarded to every BN layer. ``overlay`` maps BN layer name ->
    (mean, var) and substitutes the running statistics during eval/collect
    (adapted model views). With mode="collect", per-layer input moments are
    appended to ``collect_sink`` as (count, mean, m2) tuples. ``fused_sink``
    receives the subtraction-fused skip features and bottleneck.
    """
    if mode not in ("train", "eval", "collect"):
        raise ValueError(f"unknown forward mode: {mode!r}")
    pre = pre if isinstance(pre, nc.Tensor) else nc.Tensor(np.asarray(pre))
    post = post if isinstance(post, nc.Tensor) else nc.Tensor(np.asarray(post))
    _check_inputs(model, pre, post)

    def run_conv(name: str, x):
        sname = model.resolve(name)
        return nc.conv2d(x, model.store[f"{sname}/w"], model.store[f"{sname}/b"],
                         stride=_conv_spec(model, sname)[4],
                         padding=_conv_spec(model, sname)[5])

    def run_bn(name: str, x):
        sname = model.resolve(name)
        st = model.bn_states[sname]
        stats = None
        if overlay is not None and mode != "train":
            got = overlay.get(sname)
            if got is not None:
                stats = got
        if mode == "collect":
            y, mom = nc.batchnorm(x, st, mode="collect", stats=stats)
            if collect_sink is not None:
                collect_sink.setdefault(sname, []).append(mom)
            return y
        return nc.batchnorm(x, st, mode=mode, stats=stats)

    def encode(stream: str, x):
        skips = []
        for i in range(1, model.config.stages + 1):
            x = nc.relu(run_bn(f"enc/{stream}/s{i}/bn1",
                               run_conv(f"enc/{stream}/s{i}/conv1", x)))
            x = nc.relu(run_bn(f"enc/{stream}/s{i}/bn2",
                               run_conv(f"enc/{stream}/s{i}/conv2", x)))
            skips.append(x)
            x = nc.relu(run_bn(f"enc/{stream}/s{i}/bn3",
                               run_conv(f"enc/{stream}/s{i}/down", x)))
        return skips, x

    def body():
        skips_pre, bott_pre = encode("pre", pre)
        skips_post, bott_post = encode("post", post)
        fused = [nc.sub(a, b) for a, b in zip(skips_pre, skips_post)]
        bott = nc.sub(bott_pre, bott_post)
        if fused_sink is not None:
            fused_sink["skips"] = [f.data for f in fused]
            fused_sink["bottleneck"] = bott.data
            fused_sink["stream_skips"] = ([s.data for s in skips_pre],
                                          [s.data for s in skips_post])
            fused_sink["stream_bottlenecks"] = (bott_pre.data, bott_post.data)
        x = bott
        for i in range(model.config.stages, 0, -1):
            x = nc.upsample_nearest2x(x)
            x = nc.concat_channels(x, fused[i - 1])
            x = nc.relu(run_bn(f"dec/s{i}/bn", run_conv(f"dec/s{i}/conv", x)))
        return run_conv("head", x)

    if mode == "train":
        return body()
    with nc.no_grad():
        return body()


def _conv_spec(model: Model, name: str):
    specs = model.topology.setdefault("_conv_index", {})
    if not specs:
        for entry in model.topology["convs"]:
            specs[entry[0]] = entry
    return specs[name]


def parameter_count(model: Model) -> int:
    return sum(p.data.size for p in model.store)
