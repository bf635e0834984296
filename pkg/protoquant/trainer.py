import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import torch
import torch.nn as nn

from .datasim import Adapter, LabeledFeatures, read_embeddings, write_embeddings
from .diffcore import DTYPE, l2_normalize_rows, parameter_grad_check
from .fusion import KV_MODES, FusionBlock, fuse
from .helpers import canonical_json, atomic_write, make_generator
from .losses import COMP_GRAD_MODES, align_loss, compactness_loss, separation_loss, total_loss
from .protogen import STRATEGIES, Codebook, EncoderSurrogate, PromptBank, PrototypeSet, centroid_prototypes, \
    encode_prototypes
from .quantizer import NoiseSource, assign, quantize
from .version import __version__


logger = logging.getLogger(__name__)

SCOPES = ('prompts_only', 'prompts+adapter', 'prompts+adapter+fusion', 'all')
PROMPT_MODES = ('learnable', 'fixed')
CHECKPOINT_FORMAT = 'pcq-checkpoint'


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, snapshot):
        super(TrainingDivergedError, self).__init__(message)
        self.snapshot = snapshot


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """All hyperparameters of one training run

    Defaults are desk-scale; reference_defaults() returns the published full-scale schedule. A run with epochs > 0
    is stretched to at least min_steps optimizer steps.
    """
    epochs: int = 60
    min_steps: int = 360
    batch_size: int = 30
    base_lr: float = 0.003
    warmup_epochs: int = 6
    weight_decay: float = 0.01
    tau: float = 1.0
    lambda1: float = 0.01
    lambda2: float = 0.01
    m: int = 32
    seed: int = 0
    trainable_scope: str = 'prompts+adapter+fusion'
    prototype_strategy: str = 'prompted'
    kv_mode: str = 'quantized_token'
    eval_noise: bool = False
    prompt_mode: str = 'learnable'
    straight_through: bool = False
    use_adapter: bool = True
    use_quantization: bool = True
    centroid_iterations: int = 0
    comp_grad: str = 'both'
    divergence_factor: float = 1e3
    trace: bool = False

    @classmethod
    def reference_defaults(cls, **overrides):
        """250 epochs, 10 warmup epochs, no step floor; everything else as the desk-scale defaults"""
        return cls(**dict(dict(epochs=250, warmup_epochs=10, min_steps=0), **overrides)).validate()

    def validate(self):
        if self.epochs < 0 or self.min_steps < 0 or self.batch_size < 1 or not self.base_lr > 0:
            raise ValueError('invalid schedule: epochs, min_steps >= 0, batch_size >= 1 and base_lr > 0 required')
        if self.warmup_epochs < 0:
            raise ValueError('warmup_epochs must be non-negative')
        if self.lambda1 < 0 or self.lambda2 < 0 or self.weight_decay < 0:
            raise ValueError('loss weights and weight decay must be non-negative')
        if not self.tau > 0:
            raise ValueError('invalid temperature')
        if self.m < 0:
            raise ValueError('prompt count must be non-negative')
        for value, allowed, name in ((self.trainable_scope, SCOPES, 'trainable_scope'),
                                     (self.prototype_strategy, STRATEGIES, 'prototype_strategy'),
                                     (self.kv_mode, KV_MODES, 'kv_mode'),
                                     (self.prompt_mode, PROMPT_MODES, 'prompt_mode'),
                                     (self.comp_grad, COMP_GRAD_MODES, 'comp_grad')):
            if value not in allowed:
                raise ValueError('{} must be one of {}, got {!r}'.format(name, allowed, value))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        """Builds a config from flat keys; dotted keys such as 'train.tau' use their last segment"""
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, value in d.items():
            name = key.rsplit('.', 1)[-1]
            if name not in known:
                raise ValueError('unknown config key {!r}'.format(key))
            values[name] = value
        return cls(**values).validate()

    def replace(self, **changes):
        return TrainConfig(**dict(self.to_dict(), **changes)).validate()


@dataclass
class ForwardPass:
    h_p: torch.Tensor
    assignment: object
    v: Optional[torch.Tensor]
    hybrid: torch.Tensor
    prototypes: PrototypeSet


class PcqModel(nn.Module):
    """Prototype source, adapter, quantizer and fusion block wired in training order"""

    def __init__(self, num_classes, dim, config):
        """
        :param num_classes: int

        :param dim: int
            Feature dimension d; prompts use token dimension d as well

        :param config: TrainConfig
        """
        super(PcqModel, self).__init__()
        self.config = config
        self.num_classes = num_classes
        self.dim = dim
        self.bank = PromptBank(num_classes, config.m, dim, config.seed, trainable=config.prompt_mode == 'learnable')
        self.surrogate = EncoderSurrogate(config.m, dim, dim, config.seed)
        self.codebook = Codebook(num_classes, dim, config.seed) if config.prototype_strategy == 'codebook' else None
        if config.prototype_strategy == 'centroid':
            self.register_buffer('centroids', torch.zeros((num_classes, dim), dtype=DTYPE))
        else:
            self.centroids = None
        self.adapter = Adapter(dim, enabled=config.use_adapter)
        self.fusion = FusionBlock(dim, config.kv_mode, config.seed)

    def fit_centroids(self, data):
        protos = centroid_prototypes(data.features, data.labels, self.num_classes, self.config.centroid_iterations)
        self.centroids.copy_(protos.vectors)

    def prototypes(self):
        strategy = self.config.prototype_strategy
        if strategy == 'prompted':
            return encode_prototypes(self.bank, self.surrogate)
        if strategy == 'codebook':
            return self.codebook()
        return PrototypeSet(self.centroids, 'centroid')

    def forward(self, features, noise=None):
        """
        :param features: torch.tensor (N, d)

        :param noise: Gumbel noise (see quantizer.gumbel_softmax); None for deterministic evaluation

        :return: ForwardPass
        """
        protos = self.prototypes()
        h_p = self.adapter(features)
        a = assign(h_p, protos, self.config.tau, noise, self.config.straight_through)
        if self.config.use_quantization:
            v = quantize(a.Y, protos)
            hybrid = fuse(h_p, v, protos, self.fusion)
        else:
            v, hybrid = None, h_p
        return ForwardPass(h_p, a, v, hybrid, protos)

    def losses(self, out, labels):
        """Alignment, compactness and separation terms of one forward pass

        :return: LossTerms
        """
        c = self.config
        align = align_loss(out.hybrid, out.prototypes, labels)
        comp = compactness_loss(out.h_p, out.assignment.hard, out.prototypes, c.comp_grad)
        sep = separation_loss(out.prototypes)
        return total_loss(align, comp, sep, c.lambda1, c.lambda2)


def scope_prefixes(config):
    """Parameter-name prefixes trained under config.trainable_scope"""
    prefixes = ['codebook.']
    prompted = config.prototype_strategy == 'prompted'
    if prompted and config.prompt_mode == 'learnable' and config.m > 0:
        prefixes.append('bank.prompts')
    scope = config.trainable_scope
    if scope != 'prompts_only' and config.use_adapter:
        prefixes.append('adapter.')
    if scope in ('prompts+adapter+fusion', 'all') and config.use_quantization:
        prefixes.append('fusion.')
    if scope == 'all' and prompted:
        prefixes.append('surrogate.')
    return tuple(prefixes)


def apply_scope(model, config):
    """Freezes every parameter outside the trainable scope

    :return: dict of str -> nn.Parameter
        The trainable parameters, in registration order
    """
    prefixes = scope_prefixes(config)
    trainable = {}
    for name, p in model.named_parameters():
        keep = name.startswith(prefixes)
        p.requires_grad_(keep)
        if keep:
            trainable[name] = p
    return trainable


@dataclass
class BatchTrace:
    epoch: int
    indices: torch.Tensor
    eps: torch.Tensor
    parameters: dict
    terms: dict


@dataclass
class TrainState:
    model: PcqModel
    config: TrainConfig
    trainable: dict
    optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0
    total_steps: int = 0
    history: list = field(default_factory=list)
    traces: list = field(default_factory=list)
    initial_total: Optional[float] = None
    scheduler: Optional[torch.optim.lr_scheduler.LambdaLR] = None


def planned_epochs(config, n):
    """Epochs actually run on n training samples: config.epochs, raised until min_steps optimizer steps fit"""
    if config.epochs == 0:
        return 0
    steps_per_epoch = math.ceil(n / config.batch_size)
    return max(config.epochs, math.ceil(config.min_steps / steps_per_epoch))


def warmup_steps(config, total_steps):
    if config.epochs == 0:
        return 0
    return int(round(total_steps * min(config.warmup_epochs, config.epochs) / config.epochs))


def lr_at(step, config, total_steps):
    """Linear warmup from 0 to base_lr, then cosine decay to 0 at total_steps

    :param step: int in [0, total_steps]

    :param config: TrainConfig

    :param total_steps: int

    :return: float
    """
    assert 0 <= step <= total_steps, "step outside schedule"
    warm = warmup_steps(config, total_steps)
    if step < warm:
        return config.base_lr * step / warm
    if total_steps == warm:
        return config.base_lr
    progress = (step - warm) / (total_steps - warm)
    return 0.5 * config.base_lr * (1 + math.cos(math.pi * progress))


def make_optimizer(trainable, config):
    params = list(trainable.values())
    if not params:
        return None
    return torch.optim.AdamW(params, lr=config.base_lr, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=config.weight_decay)


def make_scheduler(optimizer, config, total_steps, step=0):
    """LambdaLR following lr_at; after k scheduler steps the optimizer runs at lr_at(k + 1)

    A non-zero step resumes the schedule as if step updates had already been taken.
    """
    if optimizer is None or total_steps == 0:
        return None
    for group in optimizer.param_groups:
        group.setdefault('initial_lr', config.base_lr)
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_at(min(s + 1, total_steps), config, total_steps) / config.base_lr,
        last_epoch=step - 1)


def optimizer_step(state, gradients=None, lr=None, config=None):
    """One AdamW update of the trainable parameters

    :param state: TrainState

    :param gradients: dict of str -> torch.tensor (default = None)
        Gradients to install; None uses the .grad already accumulated by backward()

    :param lr: float (default = None)
        Learning rate override for this step; None leaves the rate to state.scheduler, or uses config.base_lr when
        there is no scheduler

    :param config: TrainConfig (default = state.config)

    :return: TrainState
    """
    config = config or state.config
    if lr is None and state.scheduler is None:
        lr = config.base_lr
    for name, p in state.trainable.items():
        if gradients is not None:
            g = gradients.get(name)
            p.grad = None if g is None else torch.as_tensor(g, dtype=p.dtype).reshape(p.shape).clone()
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError('non-finite gradient for parameter {}'.format(name))
    if state.optimizer is not None:
        if lr is not None:
            for group in state.optimizer.param_groups:
                group['lr'] = lr
        state.optimizer.step()
        if lr is None:
            state.scheduler.step()
    state.step += 1
    return state


def init_state(config, data):
    """Builds the model (fitting centroids if needed), freezes out-of-scope parameters and creates the optimizer
    and its learning-rate schedule"""
    config.validate()
    if data.N == 0 or data.labels is None:
        raise ValueError('training data must be non-empty and labelled')
    k = data.num_classes
    present = torch.unique(data.labels)
    if len(present) != k or int(present.min()) != 1:
        raise ValueError('empty class: every class 1..{} needs a training sample'.format(k))
    model = PcqModel(k, data.dim, config)
    if config.prototype_strategy == 'centroid':
        model.fit_centroids(data)
    trainable = apply_scope(model, config)
    optimizer = make_optimizer(trainable, config)
    total_steps = planned_epochs(config, data.N) * math.ceil(data.N / config.batch_size)
    return TrainState(model, config, trainable, optimizer, total_steps=total_steps,
                      scheduler=make_scheduler(optimizer, config, total_steps))


def _snapshot(state, epoch, terms):
    return {'epoch': epoch, 'step': state.step, 'terms': terms, 'initial_total': state.initial_total,
            'parameter_norms': {name: float(p.detach().norm()) for name, p in state.model.named_parameters()}}


def train(config, data, state=None):
    """Mini-batch training: prototypes, adapter, quantisation, fusion, losses, AdamW update

    :param config: TrainConfig

    :param data: LabeledFeatures
        Training features with 1-based labels covering every class

    :param state: TrainState (default = None)
        A state from init_state; created here when None

    :return: TrainState
        With one history entry per epoch
    """
    from .evalkit import classify

    state = state or init_state(config, data)
    model = state.model
    n, bs = data.N, config.batch_size
    epochs = planned_epochs(config, n)
    if epochs > config.epochs:
        logger.debug('stretching %d epochs to %d for a floor of %d steps', config.epochs, epochs, config.min_steps)
    shuffle_gen = make_generator(config.seed, 'shuffle')
    noise = NoiseSource(config.seed, 'gumbel')

    for epoch in range(epochs):
        perm = torch.randperm(n, generator=shuffle_gen)
        sums = {'align': 0.0, 'comp': 0.0, 'sep': 0.0, 'total': 0.0}
        correct = 0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            x, y = data.features[idx], data.labels[idx]
            eps = noise.uniform((len(idx), model.num_classes))
            params_before = {k: v.detach().clone() for k, v in model.state_dict().items()} if config.trace else None

            out = model(x, eps)
            terms = model.losses(out, y)
            values = terms.as_dict()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError('non-finite loss at step {}'.format(state.step),
                                            _snapshot(state, epoch, values))
            if state.initial_total is None:
                state.initial_total = values['total']
            elif values['total'] > config.divergence_factor * max(state.initial_total, 1e-12):
                raise TrainingDivergedError('loss diverged at step {}'.format(state.step),
                                            _snapshot(state, epoch, values))
            if config.trace:
                state.traces.append(BatchTrace(epoch, idx.clone(), eps, params_before, values))

            if state.optimizer is not None:
                state.optimizer.zero_grad(set_to_none=True)
                terms.total.backward()
            optimizer_step(state)

            for key in sums:
                sums[key] += values[key] * len(idx)
            correct += int((classify(out.hybrid.detach(), out.prototypes.detach()) == y).sum())

        record = {key: value / n for key, value in sums.items()}
        record.update(epoch=epoch, accuracy=correct / n, lr=lr_at(state.step, config, state.total_steps))
        state.history.append(record)
        logger.info('%d: total %.5f  align %.5f  comp %.5f  sep %.5f  acc %.4f', epoch, record['total'],
                    record['align'], record['comp'], record['sep'], record['accuracy'])
    return state


def replay_batch(state, trace, data):
    """Recomputes a traced batch's losses from its stored parameters and noise

    :return: LossTerms
    """
    model = PcqModel(state.model.num_classes, state.model.dim, state.config)
    model.load_state_dict(trace.parameters)
    with torch.no_grad():
        out = model(data.features[trace.indices], trace.eps)
        return model.losses(out, data.labels[trace.indices])


def _as_rows(t):
    return t.detach().reshape(1, -1) if t.dim() < 2 else t.detach().reshape(t.shape[0], -1)


def save_checkpoint(state, directory):
    """Writes manifest.json plus one PCQE file per parameter/buffer under params/"""
    os.makedirs(os.path.join(directory, 'params'), exist_ok=True)
    tensors = state.model.state_dict()
    manifest = {
        'format': CHECKPOINT_FORMAT,
        'tool_version': __version__,
        'config': state.config.to_dict(),
        'num_classes': state.model.num_classes,
        'dim': state.model.dim,
        'step': state.step,
        'total_steps': state.total_steps,
        'history': state.history,
        'scheduler': None if state.scheduler is None else state.scheduler.state_dict(),
        'tensors': {name: list(t.shape) for name, t in tensors.items()},
    }
    for name, t in tensors.items():
        write_embeddings(os.path.join(directory, 'params', name + '.pcqe'), LabeledFeatures(_as_rows(t)))
    atomic_write(os.path.join(directory, 'manifest.json'), canonical_json(manifest))


def load_checkpoint(directory):
    """Restores a TrainState (without optimizer moments) from save_checkpoint output

    Tensors come back at the float32 precision of the embedding format; the optimizer is fresh but its learning-rate
    schedule resumes at the saved step.
    """
    with open(os.path.join(directory, 'manifest.json')) as f:
        manifest = json.load(f)
    if manifest.get('format') != CHECKPOINT_FORMAT:
        raise ValueError('not a checkpoint directory: {}'.format(directory))
    config = TrainConfig.from_dict(manifest['config'])
    model = PcqModel(manifest['num_classes'], manifest['dim'], config)
    tensors = {}
    for name, shape in manifest['tensors'].items():
        blob = read_embeddings(os.path.join(directory, 'params', name + '.pcqe'))
        tensors[name] = blob.features.reshape(shape)
    model.load_state_dict(tensors)
    trainable = apply_scope(model, config)
    optimizer = make_optimizer(trainable, config)
    scheduler = None
    if manifest.get('scheduler') is not None:
        scheduler = make_scheduler(optimizer, config, manifest['total_steps'], manifest['step'])
        scheduler.load_state_dict(manifest['scheduler'])
    return TrainState(model, config, trainable, optimizer, manifest['step'], manifest['total_steps'],
                      manifest['history'], scheduler=scheduler)


LOSS_NAMES = ('align', 'comp', 'sep', 'total')


def run_gradient_suite(seed=0, configurations=10, step=1e-5):
    """Finite-difference check of every loss w.r.t. every trainable parameter on small random problems

    Problems have N <= 8, K <= 5, d <= 8; kv_mode and prototype strategy alternate between configurations and the
    Gumbel noise is held fixed.

    :return: dict of str -> float
        Maximum relative error per loss term
    """
    gen = make_generator(seed, 'gradcheck')
    worst = {name: 0.0 for name in LOSS_NAMES}
    for c in range(configurations):
        n = int(torch.randint(2, 9, (1,), generator=gen))
        k = int(torch.randint(2, 6, (1,), generator=gen))
        d = int(torch.randint(2, 9, (1,), generator=gen))
        config = TrainConfig(m=2, seed=seed + c, kv_mode=KV_MODES[c % 2],
                             prototype_strategy='codebook' if c % 3 == 2 else 'prompted')
        model = PcqModel(k, d, config)
        trainable = apply_scope(model, config)
        with torch.no_grad():
            for p in trainable.values():
                p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=DTYPE))
        x = l2_normalize_rows(torch.randn((n, d), generator=gen, dtype=DTYPE))
        y = torch.randint(1, k + 1, (n,), generator=gen)
        eps = torch.rand((n, k), generator=gen, dtype=DTYPE).clamp(1e-3, 1 - 1e-3)
        for name in LOSS_NAMES:
            errors = parameter_grad_check(trainable, lambda: getattr(model.losses(model(x, eps), y), name), step)
            worst[name] = max([worst[name]] + list(errors.values()))
    for name, err in worst.items():
        logger.info('gradcheck %s: max relative error %.3e', name, err)
    return worst
