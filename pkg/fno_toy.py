"""
Toy Fourier neural operator: spectral convolution layers with per-operation precision placement,
pre-transform stabilizers, hand-written gradients and precision-scheduled training.

Batch fields have shape (batch, channels) + grid.shape. A layer computes

    out = act(W v + Re iDFT(R . T_K(DFT(stabilize(v)))))

where W mixes channels pointwise (float64) and R mixes channels per kept mode. A model stacks such
layers and ends in a pointwise linear projection. Only the forward transform, the per-mode
contraction and the inverse transform run under the precision mode; gradients and weight updates
are accumulated in float64.
"""

import dataclasses
import itertools
import json
import logging
import struct
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.special import erf

from contract_plan import LoweringMode, PlanCache, cache_get_or_plan, execute, parse
from dataset import ColumnStore
from grid_field import Grid, MultiTone, build_grid
from learner import Learner, MomentumSGD, relative_l2
from precision_sim import NonFiniteError, PrecisionSystem, parse_token, round_complex_array
from spectral import ModeMask, dft_modes, idft_modes, signed_frequencies
from utils import ordered_map, rank_correlation

logger = logging.getLogger(__name__)


# HYPERPARAMETERS
LEARNING_RATE = 2e-4
MOMENTUM = 0.9
DEFAULT_MODES = 4  # keep |omega_k| < 4
DEFAULT_HARDCLIP = 5.0
MAX_LAYERS = 4
TASK_SCALE = 0.05  # amplitude scale of the task's input tones
TASK_DECAY = (0.6, 0.8)  # per-task amplitude decay rate of the input tones
FREQUENCY_DECAY = (0.4, 0.6)  # amplitude decay rate of the frequency-error signal

SPECTRAL_EQUATION = "bik,iok->bok"
LOWERING = LoweringMode()
PLAN_CACHE = PlanCache()

WEIGHTS_MAGIC = b"FNOW"
WEIGHTS_VERSION = 2

TRACE_COLUMNS = ("step", "phase", "loss", "nonfinite_stage")
ABLATION_COLUMNS = ("K", "precision", "final_test_loss", "diverged")
PLACEMENT_COLUMNS = ("fft", "contraction", "ifft", "precision", "final_test_loss", "diverged")
FREQUENCY_COLUMNS = ("freq", "amplitude", "abs_err", "pct_err")


class StabilizerKind(Enum):
    NONE = "none"
    TANH = "tanh"
    HARDCLIP = "hardclip"
    TWOSIGMA = "twosigma"


@dataclass(frozen=True)
class Stabilizer:
    kind: StabilizerKind = StabilizerKind.NONE
    c: float = DEFAULT_HARDCLIP  # hardclip range [-c, c]

    def __post_init__(self):
        if self.kind is StabilizerKind.HARDCLIP and not self.c > 0:
            raise ValueError("hard clip needs c > 0, got %r" % self.c)

    @classmethod
    def parse(cls, token):
        """ "none" | "tanh" | "hardclip[:c]" | "twosigma" """
        name, _, arg = token.strip().lower().partition(":")
        try:
            kind = StabilizerKind(name)
        except ValueError:
            raise ValueError('Unknown stabilizer %r. Options are: "none", "tanh", "hardclip[:c]", "twosigma"' % token)
        if not arg:
            return cls(kind)
        if kind is not StabilizerKind.HARDCLIP:
            raise ValueError("only hardclip takes a parameter, got %r" % token)
        try:
            c = float(arg)
        except ValueError:
            raise ValueError("invalid hard clip range in %r" % token)
        return cls(kind, c)

    @property
    def token(self):
        if self.kind is StabilizerKind.HARDCLIP:
            return "hardclip:%r" % self.c
        return self.kind.value


def _field_axes(ndim, d):
    return tuple(range(ndim - d, ndim)) if d is not None else tuple(range(ndim))


def _clip_bounds(x, stabilizer, d):
    if stabilizer.kind is StabilizerKind.HARDCLIP:
        return -stabilizer.c, stabilizer.c
    axes = _field_axes(x.ndim, d)
    with np.errstate(over="ignore", invalid="ignore"):
        mean = np.mean(x, axis=axes, keepdims=True)
        std = np.std(x, axis=axes, keepdims=True)
    return mean - 2 * std, mean + 2 * std


def stabilize(x, stabilizer, d=None):
    """
    Bounded elementwise map applied right before the forward transform. The last `d` axes of `x` form
    one field (all axes when d is None); the two-sigma clip uses each field's own mean and standard
    deviation.
    """
    x = np.asarray(x, dtype=np.float64)
    if stabilizer.kind is StabilizerKind.NONE:
        return x
    if stabilizer.kind is StabilizerKind.TANH:
        return np.tanh(x)
    lo, hi = _clip_bounds(x, stabilizer, d)
    return np.clip(x, lo, hi)


def stabilizer_grad(x, stabilizer, d=None):
    """Elementwise derivative of stabilize at x. Clip bounds are held constant."""
    x = np.asarray(x, dtype=np.float64)
    if stabilizer.kind is StabilizerKind.NONE:
        return np.ones_like(x)
    if stabilizer.kind is StabilizerKind.TANH:
        return 1.0 - np.tanh(x) ** 2
    lo, hi = _clip_bounds(x, stabilizer, d)
    return ((x >= lo) & (x <= hi)).astype(np.float64)


ACTIVATIONS = ("gelu", "identity")


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return cdf + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _activate(x, activation):
    return gelu(x) if activation == "gelu" else x


def _activate_grad(x, activation):
    return gelu_grad(x) if activation == "gelu" else np.ones_like(x)


@dataclass(frozen=True)
class PrecisionMode:
    """System of each complex operation of the spectral branch; everything else runs in float64."""
    fft: PrecisionSystem = field(default_factory=PrecisionSystem.exact)
    contraction: PrecisionSystem = field(default_factory=PrecisionSystem.exact)
    ifft: PrecisionSystem = field(default_factory=PrecisionSystem.exact)

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def mixed(cls, sys):
        if sys.is_exact:
            raise ValueError("mixed precision needs a non-exact system")
        return cls(sys, sys, sys)

    @classmethod
    def contraction_only(cls, sys):
        if sys.is_exact:
            raise ValueError("a quantized contraction needs a non-exact system")
        return cls(PrecisionSystem.exact(), sys, PrecisionSystem.exact())

    @classmethod
    def parse(cls, token):
        """ "full" | "mixed:<sys>" | "amp:<sys>" (contraction only) """
        token = token.strip().lower()
        if token == "full":
            return cls.full()
        name, _, sys = token.partition(":")
        if name == "mixed" and sys:
            return cls.mixed(parse_token(sys))
        if name == "amp" and sys:
            return cls.contraction_only(parse_token(sys))
        raise ValueError('Unknown precision mode %r. Options are: "full", "mixed:<sys>", "amp:<sys>"' % token)

    @property
    def is_full(self):
        return self.fft.is_exact and self.contraction.is_exact and self.ifft.is_exact

    @property
    def token(self):
        if self.is_full:
            return "full"
        if self.fft == self.contraction == self.ifft:
            return "mixed:" + self.fft.token
        if self.fft.is_exact and self.ifft.is_exact:
            return "amp:" + self.contraction.token
        return "fft=%s;contraction=%s;ifft=%s" % (self.fft.token, self.contraction.token, self.ifft.token)


@dataclass(frozen=True)
class PrecisionSchedule:
    """
    Three contiguous phases: fully mixed, contraction-only, full precision. Phase boundaries sit at
    round(f_mixed * steps) and round((f_mixed + f_amp) * steps).
    """
    sys: PrecisionSystem = field(default_factory=PrecisionSystem.half)
    f_mixed: float = 0.25
    f_amp: float = 0.5
    f_full: float = 0.25

    def __post_init__(self):
        fractions = (self.f_mixed, self.f_amp, self.f_full)
        if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("schedule fractions must be non-negative and sum to 1, got %s" % (fractions,))
        if self.sys.is_exact:
            raise ValueError("a precision schedule needs a non-exact system")

    @classmethod
    def parse(cls, token):
        """ "default[:<sys>]" | "f_mixed,f_amp,f_full[:<sys>]" """
        head, _, sys = token.strip().lower().partition(":")
        sys = parse_token(sys) if sys else PrecisionSystem.half()
        if head == "default":
            return cls(sys)
        try:
            fractions = [float(x) for x in head.split(",")]
        except ValueError:
            fractions = []
        if len(fractions) != 3:
            raise ValueError('Unknown schedule %r. Options are: "default[:<sys>]", "f_mixed,f_amp,f_full[:<sys>]"'
                             % token)
        return cls(sys, *fractions)

    @property
    def token(self):
        return "%r,%r,%r:%s" % (self.f_mixed, self.f_amp, self.f_full, self.sys.token)

    def boundaries(self, steps):
        return int(round(self.f_mixed * steps)), int(round((self.f_mixed + self.f_amp) * steps))

    def phase(self, step, steps):
        """(phase name, PrecisionMode) of the 0-based `step` out of `steps`."""
        b1, b2 = self.boundaries(steps)
        if step < b1:
            return "mixed", PrecisionMode.mixed(self.sys)
        if step < b2:
            return "amp", PrecisionMode.contraction_only(self.sys)
        return "full", PrecisionMode.full()


def poisson_targets(inputs, grid):
    """u with u^(omega) = f^(omega) / (1 + 4 pi^2 |omega|^2) over the last d axes, i.e. u - Lap u = f."""
    inputs = np.asarray(inputs, dtype=np.float64)
    axes = _field_axes(inputs.ndim, grid.d)
    f = signed_frequencies(grid.m)
    k2 = sum(g ** 2 for g in np.meshgrid(*([f] * grid.d), indexing="ij"))
    multiplier = 1.0 / (1.0 + 4 * np.pi ** 2 * k2)
    return np.real(np.fft.ifftn(np.fft.fftn(inputs, axes=axes) * multiplier, axes=axes))


@dataclass(frozen=True, eq=False)
class ToyTask:
    """
    Operator-learning samples for u - Lap u = f on the unit torus. Inputs f are decaying multi-tone
    fields (tones 1..max_freq); targets are computed from the unscaled inputs, `input_scale` only
    multiplies what the model sees.
    """
    grid: Grid
    train_inputs: np.ndarray  # (n_train, 1) + grid.shape
    train_targets: np.ndarray
    test_inputs: np.ndarray
    test_targets: np.ndarray
    seed: int = 0
    input_scale: float = 1.0

    @classmethod
    def generate(cls, d=1, m=64, n_train=32, n_test=16, max_freq=10, scale=TASK_SCALE, input_scale=1.0, seed=0):
        grid = build_grid(d, m)
        if 2 * max_freq >= m:
            raise ValueError("tones up to %i alias on an m=%i grid (need m > 2 * max_freq)" % (max_freq, m))
        if n_train < 1 or n_test < 1:
            raise ValueError("need at least one train and one test sample, got %i and %i" % (n_train, n_test))
        rng = np.random.default_rng(seed)
        r = rng.uniform(*TASK_DECAY)
        f = np.stack([MultiTone.random(rng, d, max_freq, scale, decay=(r, r)).values_on(grid)
                      for _ in range(n_train + n_test)])
        f = f.reshape((n_train + n_test, 1) + grid.shape)
        u = poisson_targets(f, grid)
        logger.debug("generated task d=%i m=%i decay=%.3f (%i train, %i test)", d, m, r, n_train, n_test)
        return cls(grid, input_scale * f[:n_train], u[:n_train], input_scale * f[n_train:], u[n_train:],
                   seed, input_scale)

    def train_set(self):
        store = ColumnStore()
        store.add_column("input", list(self.train_inputs))
        store.add_column("target", list(self.train_targets))
        return store


@dataclass(eq=False)
class SpectralLayer:
    channels_in: int
    channels_out: int
    grid: Grid
    mask: ModeMask
    R: np.ndarray  # complex (channels_in, channels_out, K), K axis in self.modes order
    W: np.ndarray  # real (channels_in, channels_out)
    stabilizer: Stabilizer = field(default_factory=Stabilizer)
    activation: str = "gelu"
    precision: PrecisionMode = field(default_factory=PrecisionMode.full)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.complex128)
        self.W = np.asarray(self.W, dtype=np.float64)
        shape_R = (self.channels_in, self.channels_out, len(self.modes))
        if self.R.shape != shape_R:
            raise ValueError("R has shape %s, expected %s" % (self.R.shape, shape_R))
        if self.W.shape != (self.channels_in, self.channels_out):
            raise ValueError("W has shape %s, expected %s" % (self.W.shape, (self.channels_in, self.channels_out)))
        if not (np.all(np.isfinite(self.R)) and np.all(np.isfinite(self.W))):
            raise ValueError("layer weights must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError("Unknown activation %r. Options are: %s" % (self.activation, ", ".join(ACTIVATIONS)))

    @cached_property
    def modes(self):
        """(K, d) signed frequencies of the kept modes."""
        return self.mask.signed(self.grid)

    @property
    def variables(self):
        return [self.R, self.W]

    def on_grid(self, grid):
        """The same weights applied to fields sampled on another grid."""
        return dataclasses.replace(self, grid=grid)


def init_layer(channels_in, channels_out, grid, modes=DEFAULT_MODES, stabilizer=None, activation="gelu",
               precision=None, rng=None):
    """Gaussian weights with std 1/sqrt(channels_in * K)."""
    rng = np.random.default_rng(rng)
    mask = ModeMask.cutoff(grid, modes)
    k = len(mask.keep)
    std = 1.0 / np.sqrt(channels_in * k)
    shape = (channels_in, channels_out, k)
    R = std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    W = std * rng.standard_normal((channels_in, channels_out))
    return SpectralLayer(channels_in, channels_out, grid, mask, R, W, stabilizer or Stabilizer(), activation,
                         precision or PrecisionMode.full())


@dataclass(frozen=True, eq=False)
class _LayerCache:
    v: np.ndarray
    X: np.ndarray
    pre: np.ndarray
    mode: PrecisionMode


def _check(arr, stage):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(stage)


def _contract(equation, a, b, sys, stage):
    plan = cache_get_or_plan(PLAN_CACHE, parse(equation, [a.shape, b.shape]), sys, LOWERING)
    try:
        out = execute(plan, [a, b], sys, LOWERING)
    except NonFiniteError as e:
        raise NonFiniteError(stage, step=e.step)
    _check(out, stage)
    return out


def _forward(layer, v, mode):
    v = np.asarray(v, dtype=np.float64)
    expected = (layer.channels_in,) + layer.grid.shape
    if v.ndim != len(expected) + 1 or v.shape[1:] != expected:
        raise ValueError("input of shape %s does not match (batch,) + %s" % (v.shape, expected))
    if not np.all(np.isfinite(v)):
        raise ValueError("forward expects a finite input")
    grid, modes = layer.grid, layer.modes

    s = stabilize(v, layer.stabilizer, grid.d)
    _check(s, "pre-fft")
    X = dft_modes(s, grid, modes, mode.fft, stage="fft")
    _check(X, "fft")
    Y = _contract(SPECTRAL_EQUATION, X, layer.R, mode.contraction, "contraction")
    y = idft_modes(Y, grid, modes, mode.ifft, stage="ifft")
    _check(y, "ifft")
    with np.errstate(over="ignore", invalid="ignore"):
        z = np.einsum("bi...,io->bo...", v, layer.W)
        _check(z, "skip")
        pre = z + np.real(y)
        out = _activate(pre, layer.activation)
    _check(out, "activation")
    return out, _LayerCache(v, X, pre, mode)


def forward(layer, v, mode=None):
    """
    act(W v + Re iDFT(R . DFT(stabilize(v)))) on a (batch, channels_in) + grid.shape input. `mode`
    overrides the layer's own precision. A non-finite intermediate raises NonFiniteError naming the
    stage: pre-fft, fft, contraction, ifft, skip or activation.
    """
    out, _ = _forward(layer, v, mode or layer.precision)
    return out


def _pointwise_weight_grad(v, g):
    """(in, out) gradient of a channel-mixing weight: v (b, in, *grid) against g (b, out, *grid)."""
    axes = [0, *range(2, g.ndim)]
    return np.tensordot(v, g, axes=(axes, axes))


def backward(layer, v, upstream_grad, mode=None, cache=None):
    """
    Gradients of a scalar loss through forward, given upstream_grad = dL/d(output):
    (grad_v, grad_R, grad_W) with grad_R = dL/dRe(R) + i dL/dIm(R). The adjoints of the three complex
    operations run under the mode's systems; everything is accumulated in float64.
    """
    mode = mode or layer.precision
    if cache is None:
        _, cache = _forward(layer, v, mode)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.pre.shape:
        raise ValueError("upstream gradient of shape %s, output has shape %s" % (g.shape, cache.pre.shape))
    grid, modes = layer.grid, layer.modes

    gp = g * _activate_grad(cache.pre, layer.activation)
    grad_W = _pointwise_weight_grad(cache.v, gp)
    grad_v = np.einsum("bo...,io->bi...", gp, layer.W)

    # adjoint of Re(iDFT): n * DFT
    G_Y = round_complex_array(mode.ifft, grid.n * dft_modes(gp, grid, modes, mode.ifft, stage="backward:ifft"))
    _check(G_Y, "backward:ifft")
    G_X = _contract("bok,iok->bik", G_Y, np.conj(layer.R), mode.contraction, "backward:contraction")
    grad_R = _contract("bik,bok->iok", np.conj(cache.X), G_Y, mode.contraction, "backward:contraction")
    # adjoint of the normalized DFT of a real field: Re(iDFT) / n
    g_s = np.real(idft_modes(G_X, grid, modes, mode.fft, stage="backward:fft")) / grid.n
    _check(g_s, "backward:fft")

    grad_v = grad_v + g_s * stabilizer_grad(cache.v, layer.stabilizer, grid.d)
    return grad_v, grad_R, grad_W


@dataclass(eq=False)
class FNOModel:
    """
    Spectral layers followed by a pointwise linear projection (channels of the last layer to output
    channels, float64). Every spectral layer applies its own activation; the projection is linear.
    """
    layers: list
    projection: np.ndarray = None  # real (layers[-1].channels_out, channels); None means identity

    def __post_init__(self):
        if not 1 <= len(self.layers) <= MAX_LAYERS:
            raise ValueError("a model has 1 to %i layers, got %i" % (MAX_LAYERS, len(self.layers)))
        for a, b in zip(self.layers, self.layers[1:]):
            if a.channels_out != b.channels_in:
                raise ValueError("layer with %i output channels feeds one with %i inputs"
                                 % (a.channels_out, b.channels_in))
            if a.grid != b.grid:
                raise ValueError("all layers of a model share one grid")
        width = self.layers[-1].channels_out
        if self.projection is None:
            self.projection = np.eye(width)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.ndim != 2 or self.projection.shape[0] != width:
            raise ValueError("projection has shape %s, expected (%i, channels)" % (self.projection.shape, width))
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection weights must be finite")

    @property
    def grid(self):
        return self.layers[0].grid

    @property
    def channels_out(self):
        return self.projection.shape[1]

    @property
    def variables(self):
        return [t for layer in self.layers for t in layer.variables] + [self.projection]

    def on_grid(self, grid):
        return FNOModel([layer.on_grid(grid) for layer in self.layers], self.projection)

    def forward(self, v, mode=None, keep_cache=False):
        caches = []
        for layer in self.layers:
            v, cache = _forward(layer, v, mode or layer.precision)
            caches.append(cache)
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.einsum("bi...,io->bo...", v, self.projection)
        _check(out, "projection")
        caches.append(v)
        return (out, caches) if keep_cache else out

    def backward(self, caches, upstream_grad):
        """(grad of the model input, gradients in self.variables order)"""
        *layer_caches, hidden = caches
        g = np.asarray(upstream_grad, dtype=np.float64)
        grads = [_pointwise_weight_grad(hidden, g)]
        g = np.einsum("bo...,io->bi...", g, self.projection)
        for layer, cache in zip(reversed(self.layers), reversed(layer_caches)):
            g, grad_R, grad_W = backward(layer, cache.v, g, cache.mode, cache)
            grads = [grad_R, grad_W] + grads
        return g, grads


def build_model(grid, modes=DEFAULT_MODES, channels=1, width=None, layers=1, stabilizer=None, seed=0):
    """
    `layers` GELU spectral layers from `channels` to hidden width `width` (default `channels`), then
    a linear projection back to `channels`. The projection starts at 2 I, undoing gelu'(0) = 1/2.
    """
    if not 1 <= layers <= MAX_LAYERS:
        raise ValueError("a model has 1 to %i layers, got %i" % (MAX_LAYERS, layers))
    rng = np.random.default_rng(seed)
    width = width or channels
    stack = [init_layer(channels if i == 0 else width, width, grid, modes, stabilizer, "gelu", rng=rng)
             for i in range(layers)]
    return FNOModel(stack, 2.0 * np.eye(width, channels))


def relative_l2_loss(pred, target):
    """
    Mean over the batch of ||pred - target||^2 / ||target||^2 and its gradient with respect to pred.
    Also returns the mean relative L2 (unsquared), which is what gets reported.
    """
    axes = tuple(range(1, pred.ndim))
    diff = pred - target
    with np.errstate(over="ignore", invalid="ignore"):
        den = np.maximum(np.sum(target ** 2, axis=axes, keepdims=True), np.finfo(np.float64).tiny)
        sq = np.sum(diff ** 2, axis=axes, keepdims=True) / den
        grad = 2.0 * diff / den / len(pred)
    return float(np.mean(sq)), grad, float(np.mean(np.sqrt(sq)))


class OperatorLearner(Learner):
    """Trains an FNOModel on the mean squared relative L2; train_step reports the mean relative L2."""

    def __init__(self, model, optimizer):
        super(OperatorLearner, self).__init__(model, optimizer)
        self.mode = PrecisionMode.full()

    def loss_and_gradients(self, inputs, targets):
        out, caches = self.model.forward(inputs, self.mode, keep_cache=True)
        loss, g, rel = relative_l2_loss(out, targets)
        if not np.isfinite(loss):
            raise NonFiniteError("loss")
        _, grads = self.model.backward(caches, g)
        if not all(np.all(np.isfinite(grad)) for grad in grads):
            raise NonFiniteError("backward")
        return rel, grads


def evaluate(model, inputs, targets, mode=None):
    """Mean relative L2 of model(inputs) against targets."""
    out = model.forward(inputs, mode)
    return float(np.mean(relative_l2(out, targets, axis=tuple(range(1, out.ndim)))))


@dataclass(eq=False)
class TrainingTrace:
    rows: ColumnStore
    final_test_loss: float
    nonfinite: NonFiniteError = None
    wall_time: float = 0.0
    full_test_loss: float = float("nan")  # the trained weights evaluated in full precision

    @property
    def diverged(self):
        return self.nonfinite is not None or not np.isfinite(self.final_test_loss)

    @property
    def losses(self):
        return np.asarray(self.rows["loss"], dtype=np.float64)

    def phase_counts(self):
        return Counter(self.rows["phase"])

    def to_csv(self, path):
        return self.rows.to_csv(path, list(TRACE_COLUMNS))


def _phase_fn(mode_or_schedule, steps):
    if isinstance(mode_or_schedule, PrecisionSchedule):
        return lambda step: mode_or_schedule.phase(step, steps)
    mode = mode_or_schedule or PrecisionMode.full()
    return lambda step: (mode.token, mode)


def train(task, model=None, mode_or_schedule=None, steps=500, lr=LEARNING_RATE, momentum=MOMENTUM, seed=0,
          batch_size=None):
    """
    Momentum SGD on the task's training set (full batch unless batch_size is given). A non-finite
    intermediate ends the run: the failing step is recorded with its stage and the trace is returned.
    The final test loss is evaluated under the precision of the last phase; full_test_loss evaluates the
    same weights in full precision.
    """
    model = model or build_model(task.grid, seed=seed)
    phase_of = _phase_fn(mode_or_schedule, steps)
    learner = OperatorLearner(model, MomentumSGD(lr, momentum))
    rng = np.random.default_rng(seed)
    store = task.train_set() if batch_size else None

    rows = ColumnStore()
    for name in TRACE_COLUMNS:
        rows.add_column(name, [])
    event = None
    start = time.perf_counter()
    for step in range(steps):
        phase, learner.mode = phase_of(step)
        if store is not None:
            batch = store.sample(min(batch_size, len(store)), rng)
            inputs, targets = np.stack(batch["input"]), np.stack(batch["target"])
        else:
            inputs, targets = task.train_inputs, task.train_targets
        try:
            loss = learner.train_step(inputs, targets)
        except NonFiniteError as e:
            logger.warning("non-finite value at step %i (phase %s): %s", step, phase, e)
            rows.append({"step": step, "phase": phase, "loss": float("nan"), "nonfinite_stage": e.stage})
            event = e
            break
        rows.append({"step": step, "phase": phase, "loss": loss, "nonfinite_stage": ""})
        if step % 100 == 0:
            logger.debug("step %i (%s): relative L2 %.5f", step, phase, loss)

    test_loss = full_test_loss = float("nan")
    if event is None:
        final_mode = phase_of(steps - 1)[1] if steps > 0 else PrecisionMode.full()
        try:
            test_loss = evaluate(model, task.test_inputs, task.test_targets, final_mode)
        except NonFiniteError as e:
            logger.warning("non-finite value while evaluating: %s", e)
            event = e
        full_test_loss = test_loss if final_mode.is_full else evaluate(model, task.test_inputs, task.test_targets)
    return TrainingTrace(rows, test_loss, event, time.perf_counter() - start, full_test_loss)


def _run_config(task, mode, modes, steps, lr, momentum, seed, stabilizer):
    model = build_model(task.grid, modes=modes, stabilizer=stabilizer, seed=seed)
    trace = train(task, model, mode, steps, lr, momentum, seed)
    return trace


def mode_ablation(task, mode_counts, precisions, steps=500, lr=LEARNING_RATE, momentum=MOMENTUM, seed=0,
                  stabilizer=None, workers=1):
    """Final test loss and wall time for every (K, precision mode) pair, in input order."""
    configs = list(itertools.product(mode_counts, precisions))

    def run(config):
        K, mode = config
        trace = _run_config(task, mode, K, steps, lr, momentum, seed, stabilizer)
        logger.info("K=%i %s: test loss %.5f (%.1fs)", K, mode.token, trace.final_test_loss, trace.wall_time)
        return {"K": K, "precision": mode.token, "final_test_loss": trace.final_test_loss,
                "diverged": trace.diverged, "wall_time": trace.wall_time}

    return ordered_map(run, configs, workers)


def placement_ablation(task, sys, modes=DEFAULT_MODES, steps=500, lr=LEARNING_RATE, momentum=MOMENTUM, seed=0,
                       stabilizer=None, workers=1):
    """Trains once for each of the 8 ways of quantizing the forward transform, contraction and inverse transform."""
    exact = PrecisionSystem.exact()
    placements = list(itertools.product((False, True), repeat=3))

    def run(placement):
        mode = PrecisionMode(*[sys if quantized else exact for quantized in placement])
        trace = _run_config(task, mode, modes, steps, lr, momentum, seed, stabilizer)
        logger.info("placement %s: test loss %.5f", mode.token, trace.final_test_loss)
        return dict(zip(("fft", "contraction", "ifft"), placement), precision=mode.token,
                    final_test_loss=trace.final_test_loss, diverged=trace.diverged, wall_time=trace.wall_time)

    return ordered_map(run, placements, workers)


@dataclass(frozen=True)
class PreactivationShift:
    magnitude: float  # mean | |X_s| - |X_v| | over kept modes
    phase: float  # mean wrapped |arg X_s - arg X_v| over kept modes with X_v != 0


def preactivation_shift(v, stabilizer, grid, mask):
    """How much the stabilizer changes the kept part of a field's spectrum."""
    v = np.asarray(v, dtype=np.float64)
    modes = mask.signed(grid)
    exact = PrecisionSystem.exact()
    Xv = dft_modes(v, grid, modes, exact)
    Xs = dft_modes(stabilize(v, stabilizer, grid.d), grid, modes, exact)
    magnitude = float(np.mean(np.abs(np.abs(Xs) - np.abs(Xv))))
    nz = np.abs(Xv) > 1e-12
    phase = float(np.mean(np.abs(np.angle(Xs[nz] / Xv[nz])))) if nz.any() else 0.0
    return PreactivationShift(magnitude, phase)


@dataclass(frozen=True, eq=False)
class FrequencyReport:
    freqs: np.ndarray  # tone frequency k
    amplitudes: np.ndarray  # constructed a_k
    recovered: np.ndarray  # 2 |c_k| under exact arithmetic
    abs_err: np.ndarray  # 2 |c_k(sys) - c_k(exact)|
    pct_err: np.ndarray  # 100 abs_err / a_k (0 where a_k = 0)
    spearman: float

    def rows(self):
        return [[int(f), float(a), float(e), float(p)]
                for f, a, e, p in zip(self.freqs, self.amplitudes, self.abs_err, self.pct_err)]


def synthetic_frequency_experiment(seed, max_freq=10, m=256, d=1, sys=None, scale=1.0, decay=FREQUENCY_DECAY):
    """
    Spectrum of an exponentially decaying multi-tone field under exact arithmetic and under `sys`
    (default half), compared tone by tone. The rounding error of a coefficient does not shrink with
    its tone's amplitude, so the percentage error climbs with frequency.
    """
    sys = sys or PrecisionSystem.half()
    grid = build_grid(d, m)
    if 2 * max_freq >= m:
        raise ValueError("tones up to %i alias on an m=%i grid" % (max_freq, m))
    signal = MultiTone.random(np.random.default_rng(seed), d, max_freq, scale, decay=decay)
    values = signal.values_on(grid).reshape(grid.shape)
    modes = np.asarray(signal.freqs, dtype=np.int64).reshape(-1, d)
    exact = dft_modes(values, grid, modes, PrecisionSystem.exact())
    approx = dft_modes(values, grid, modes, sys)

    freqs = np.max(np.abs(modes), axis=1)
    amplitudes = np.asarray(signal.amps, dtype=np.float64)
    abs_err = 2 * np.abs(approx - exact)
    pct_err = np.divide(100 * abs_err, amplitudes, out=np.zeros_like(abs_err), where=amplitudes > 0)
    return FrequencyReport(freqs, amplitudes, 2 * np.abs(exact), abs_err, pct_err, rank_correlation(freqs, pct_err))


def frequency_trend(seeds, max_freq=10, m=256, d=1, sys=None, scale=1.0, workers=1, decay=FREQUENCY_DECAY):
    """Per-tone columns averaged over seeds; spearman is the mean of the per-seed rank correlations."""
    reports = ordered_map(lambda s: synthetic_frequency_experiment(s, max_freq, m, d, sys, scale, decay), seeds,
                          workers)
    if not reports:
        raise ValueError("frequency trend needs at least one seed")
    mean = lambda name: np.mean([getattr(r, name) for r in reports], axis=0)
    return FrequencyReport(reports[0].freqs, mean("amplitudes"), mean("recovered"), mean("abs_err"),
                           mean("pct_err"), float(np.mean([r.spearman for r in reports])))


def save_weights(model, path):
    """
    b"FNOW", little-endian uint32 header length, UTF-8 JSON header, then the raw little-endian tensors
    at the offsets the header gives (relative to the end of the header).
    """
    blobs = []

    def entry(arr):
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        data = arr.tobytes()
        offset = sum(len(b) for b in blobs)
        blobs.append(data)
        return {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}

    header = {"version": WEIGHTS_VERSION, "layers": []}
    for layer in model.layers:
        tensors = {"R": entry(layer.R), "W": entry(layer.W)}
        header["layers"].append({"channels_in": layer.channels_in, "channels_out": layer.channels_out,
                                 "m": layer.grid.m, "d": layer.grid.d, "modes": layer.modes.tolist(),
                                 "stabilizer": layer.stabilizer.token, "activation": layer.activation,
                                 "tensors": tensors})
    header["projection"] = entry(model.projection)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for data in blobs:
            f.write(data)
    return path


def load_weights(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC or len(data) < 8:
        raise ValueError("%s is not a weights file" % path)
    (length,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8:8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError("corrupt weights header in %s: %s" % (path, e))
    if header.get("version") != WEIGHTS_VERSION:
        raise ValueError("unsupported weights version %r" % header.get("version"))
    base = 8 + length

    def tensor(t):
        start = base + t["offset"]
        if start + t["nbytes"] > len(data):
            raise ValueError("weights file %s is truncated" % path)
        arr = np.frombuffer(data[start:start + t["nbytes"]], dtype=np.dtype(t["dtype"]))
        return arr.reshape(t["shape"]).astype(arr.dtype.newbyteorder("="))

    layers = []
    for spec in header["layers"]:
        tensors = {name: tensor(t) for name, t in spec["tensors"].items()}
        grid = build_grid(spec["d"], spec["m"])
        mask = ModeMask(frozenset(tuple(w) for w in spec["modes"]))
        layers.append(SpectralLayer(spec["channels_in"], spec["channels_out"], grid, mask, tensors["R"],
                                    tensors["W"], Stabilizer.parse(spec["stabilizer"]), spec["activation"]))
    return FNOModel(layers, tensor(header["projection"]))
