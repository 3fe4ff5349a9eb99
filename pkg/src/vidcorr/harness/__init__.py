"""Run configuration, the training loop, checkpointing, and evaluation.

Config files are flat "key = value" text with dotted namespaces
(view.*, model.*, temp.*, opt.*, prop.*) plus a handful of top-level
run keys. Every random draw descends from the single run seed through
named substreams keyed by step number, so training is reproducible
byte-for-byte and resumable mid-run without replaying work.
"""

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from vidcorr.encoder import (
    EncoderParams,
    ModelConfig,
    apply_mask_tokens,
    extract_inference_features,
    forward_batch,
    patchify_batch,
)
from vidcorr.metrics import aggregate, report, score_track
from vidcorr.numerics import (
    Rng,
    add,
    backward,
    gather_rows,
    l2_normalize_rows,
    named_list_bytes,
    narrow,
    parse_named_list,
    reshape,
    scale,
)
from vidcorr.objectives import (
    TeacherState,
    TemperatureConfig,
    build_affinity,
    center_update,
    ema_update,
    loss_in_aff,
    loss_in_mim,
    loss_out_g2g,
    loss_out_l2g,
    student_distribution,
    teacher_distribution,
    total_loss,
    zero_loss,
)
from vidcorr.optimizer import (
    OptimizerConfig,
    OptState,
    adamw_step,
    lr_at,
    wd_at,
)
from vidcorr.propagation import PropagationConfig, labels_to_mask, propagate_video
from vidcorr.views import (
    ViewConfig,
    load_store,
    make_crops,
    make_frame_pairs,
    sample_clip,
    sample_clip_masks,
)

from .synthetic import gen_synthetic_dataset  # re-export


# -- configuration ---------------------------------------------------------------


@dataclass
class OptKnobs:
    """Optimizer settings that live in the config file; steps per epoch
    only become known once the dataset is indexed."""

    warmup_epochs: int = 1
    lr_scale_constant: float = 0.003
    lr_floor_fraction: float = 1e-6
    wd_start: float = 0.04
    wd_end: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 2
    batch: int = 2
    data: str = ""
    out: str = "run_out"
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    gate_probability: float = 0.5
    mask_ratio: tuple = (0.1, 0.5)
    loss_mode: str = "full"
    checkpoint_every: int = 1
    view: ViewConfig = None
    model: ModelConfig = None
    temp: TemperatureConfig = None
    opt: OptKnobs = None
    prop: PropagationConfig = None

    def __post_init__(self):
        self.view = self.view or ViewConfig()
        self.model = self.model or ModelConfig()
        self.temp = self.temp or TemperatureConfig()
        self.opt = self.opt or OptKnobs()
        self.prop = self.prop or PropagationConfig()
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if not 0.0 <= self.gate_probability <= 1.0:
            raise ValueError("gate_probability must lie in [0, 1]")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.loss_mode not in ("full", "g2g"):
            raise ValueError("loss_mode must be 'full' or 'g2g'")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0 (0 keeps only the last epoch)")


_SECTIONS = {"view": ViewConfig, "model": ModelConfig, "temp": TemperatureConfig,
             "opt": OptKnobs, "prop": PropagationConfig}
_TOP_FIELDS = ("seed", "epochs", "batch", "data", "out", "ema_momentum",
               "center_momentum", "gate_probability", "mask_ratio", "loss_mode",
               "checkpoint_every")


def parse_value(text):
    """Literal scalars (int, float, true/false), comma tuples, else the
    raw string."""
    text = text.strip()
    if "," in text:
        return tuple(parse_value(part) for part in text.split(","))
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def parse_config_text(text):
    """'key = value' lines into an ordered dict; '#' starts a comment."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = parse_value(value)
    return pairs


def build_run_config(pairs):
    """Merge key/value pairs over the defaults; every key is validated
    against the dataclasses, so typos fail loudly."""
    top = {}
    buckets = {name: {} for name in _SECTIONS}
    for key, value in pairs.items():
        if isinstance(value, str):
            value = parse_value(value)
        if "." in key:
            section, _, field_name = key.partition(".")
            cls = _SECTIONS.get(section)
            if cls is None:
                raise KeyError(f"unknown config section {section!r}")
            if field_name not in {f.name for f in fields(cls)}:
                raise KeyError(f"unknown config key {key!r}")
            buckets[section][field_name] = value
        else:
            if key not in _TOP_FIELDS:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = value
    sections = {name: cls(**buckets[name]) for name, cls in _SECTIONS.items()}
    return RunConfig(**top, **sections)


def load_run_config(path, overrides=None):
    pairs = parse_config_text(Path(path).read_text())
    pairs.update(overrides or {})
    return build_run_config(pairs)


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_config_text(run):
    """Stable, complete key = value dump; checkpoints echo this text so
    a run is reconstructible from its artifacts alone."""
    lines = [f"{name} = {_format_value(getattr(run, name))}" for name in _TOP_FIELDS]
    for section in sorted(_SECTIONS):
        sub = getattr(run, section)
        for f in sorted(fields(type(sub)), key=lambda f: f.name):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def make_opt_config(run, steps_per_epoch):
    return OptimizerConfig(
        batch_size=run.batch,
        clip_len=run.view.clip_len,
        steps_per_epoch=steps_per_epoch,
        total_epochs=run.epochs,
        warmup_epochs=run.opt.warmup_epochs,
        lr_scale_constant=run.opt.lr_scale_constant,
        lr_floor_fraction=run.opt.lr_floor_fraction,
        wd_start=run.opt.wd_start,
        wd_end=run.opt.wd_end,
        betas=(run.opt.beta1, run.opt.beta2),
        eps=run.opt.eps,
    )


# -- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    step: int
    config_text: str
    records: list  # ordered (name, array)

    def record_dict(self):
        return dict(self.records)


def checkpoint_bytes(student, teacher, opt_state, step, config_text):
    records = [(f"student/{n}", t.data) for n, t in student.named_parameters()]
    records += [(f"teacher/{n}", t.data) for n, t in teacher.params.named_parameters()]
    records.append(("teacher/center_cls", teacher.center_cls.data))
    records.append(("teacher/center_patch", teacher.center_patch.data))
    records += [(f"opt/{n}", arr) for n, arr in opt_state.to_named_list()]
    cfg = config_text.encode("utf-8")
    header = (CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<Q", step)
              + struct.pack("<I", len(cfg)) + cfg)
    return header + named_list_bytes(records)


def save_checkpoint(path, student, teacher, opt_state, step, config_text):
    Path(path).write_bytes(checkpoint_bytes(student, teacher, opt_state, step,
                                            config_text))
    return Path(path)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = buf[4]
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    step = struct.unpack_from("<Q", buf, 5)[0]
    cfg_len = struct.unpack_from("<I", buf, 13)[0]
    config_text = buf[17:17 + cfg_len].decode("utf-8")
    records, _ = parse_named_list(buf, 17 + cfg_len)
    return Checkpoint(version, step, config_text, records)


def restore_state(ckpt, run):
    """Rebuild (student, teacher, opt_state) from checkpoint records."""
    recs = ckpt.record_dict()
    student = EncoderParams.init(run.model, Rng(run.seed).substream("init"))
    for name, t in student.named_parameters():
        t.data = recs[f"student/{name}"].astype(t.dtype, copy=True)
    teacher = TeacherState.from_student(student, run.ema_momentum,
                                        run.center_momentum)
    for name, t in teacher.params.named_parameters():
        t.data = recs[f"teacher/{name}"].astype(t.dtype, copy=True)
    teacher.center_cls.data = recs["teacher/center_cls"].astype(
        teacher.center_cls.dtype, copy=True)
    teacher.center_patch.data = recs["teacher/center_patch"].astype(
        teacher.center_patch.dtype, copy=True)
    opt_items = [(n[len("opt/"):], arr) for n, arr in ckpt.records
                 if n.startswith("opt/")]
    opt_state = OptState.from_named_list(opt_items)
    return student, teacher, opt_state


def params_from_checkpoint(path):
    """Inference-side loader: (EncoderParams without gradients, RunConfig)."""
    ckpt = load_checkpoint(path)
    run = build_run_config(parse_config_text(ckpt.config_text))
    recs = ckpt.record_dict()
    params = EncoderParams.init(run.model, Rng(0), requires_grad=False)
    for name, t in params.named_parameters():
        t.data = recs[f"student/{name}"].astype(t.dtype, copy=True)
    return params, run


# -- the training loop -----------------------------------------------------------


def _stack_images(records):
    return np.stack([rec.image for rec in records])


def _masked_rows(patch_logits, masks):
    """Per frame, the (K, k) unit-norm rows of the masked positions of a
    (L, P, k) logit block; feeds the affinity matrices."""
    clip_len, p, k = patch_logits.shape
    flat = reshape(patch_logits, (clip_len * p, k))
    out = []
    for i, pattern in enumerate(masks):
        rows = i * p + np.nonzero(pattern.m)[0]
        out.append(l2_normalize_rows(gather_rows(flat, rows)))
    return out


def train_step(step, group, student, teacher, run, opt_config, opt_state, rng):
    """One optimization step over a batch of clips.

    Returns (breakdown, lr, wd, gated_any, applied); applied is False
    when a non-finite loss or gradient skipped the update."""
    view, model, temps = run.view, run.model, run.temp
    clip_len, m_locals = view.clip_len, view.locals_per_frame
    k = model.proj_dim
    srng = rng.substream(f"step{step}")
    pairs = make_frame_pairs(clip_len)
    gh, gw = model.token_grid(view.global_size, view.global_size)
    num_tokens = gh * gw

    # g2g mode trains on the global class-token pairs alone; frame and crop
    # draws come from substreams untouched by the skipped mask draw, so both
    # modes see identical views at a given seed
    g2g_only = run.loss_mode == "g2g"

    clips, crop_sets, clip_masks = [], [], []
    for i, source in enumerate(group):
        crng = srng.substream(f"clip{i}")
        clip = sample_clip(source, crng.substream("frames"), view)
        clips.append(clip)
        crop_sets.append(make_crops(clip, crng.substream("crops"), view))
        clip_masks.append(None if g2g_only else sample_clip_masks(
            num_tokens, clip_len, crng.substream("mask"),
            run.gate_probability, run.mask_ratio))

    batch = len(group)
    global_images = _stack_images([rec for cs in crop_sets for rec in cs.globals_])

    # teacher on unmasked globals; raw logits also feed the center update
    t_cls, t_patch, _ = forward_batch(
        patchify_batch(global_images, teacher.params, model), teacher.params, model)
    td_cls = teacher_distribution(t_cls, teacher, temps, "cls")
    td_patch = teacher_distribution(t_patch, teacher, temps, "patch")

    # student: unmasked globals for the class-pair terms, locals, and one masked
    # forward restricted to the gated-in clips
    s_cls, _, _ = forward_batch(
        patchify_batch(global_images, student, model), student, model)
    l_cls = None
    if not g2g_only:
        local_images = _stack_images(
            [rec for cs in crop_sets for per_frame in cs.locals_ for rec in per_frame])
        l_cls, _, _ = forward_batch(
            patchify_batch(local_images, student, model), student, model)

    gated = [i for i in range(batch) if clip_masks[i] is not None]
    sd_patch = None
    if gated:
        rows = np.concatenate([np.arange(i * clip_len, (i + 1) * clip_len)
                               for i in gated])
        masked_seq = apply_mask_tokens(
            patchify_batch(global_images[rows], student, model),
            np.stack([pat.m for i in gated for pat in clip_masks[i]]),
            student)
        _, s_patch_masked, _ = forward_batch(masked_seq, student, model)
        sd_patch = student_distribution(s_patch_masked, temps)

    g2g_terms, l2g_terms, mim_terms, aff_terms = [], [], [], []
    for i in range(batch):
        td_i = narrow(td_cls, 0, i * clip_len, clip_len)
        sd_i = student_distribution(narrow(s_cls, 0, i * clip_len, clip_len), temps)
        g2g_terms.append(loss_out_g2g(td_i, sd_i, pairs))
        if not g2g_only:
            loc_i = student_distribution(
                reshape(narrow(l_cls, 0, i * clip_len * m_locals, clip_len * m_locals),
                        (clip_len, m_locals, k)), temps)
            l2g_terms.append(loss_out_l2g(td_i, loc_i, pairs))
        if clip_masks[i] is None:
            continue
        gi = gated.index(i)
        tdp_i = narrow(td_patch, 0, i * clip_len, clip_len)
        sdp_i = narrow(sd_patch, 0, gi * clip_len, clip_len)
        mim_terms.append(loss_in_mim(tdp_i, sdp_i, clip_masks[i]))
        q_t = _masked_rows(narrow(t_patch, 0, i * clip_len, clip_len), clip_masks[i])
        q_s = _masked_rows(
            narrow(s_patch_masked, 0, gi * clip_len, clip_len), clip_masks[i])
        t_aff = [build_affinity(q_t[j], q_t[j + 1], temps.teacher, j, j + 1)
                 for j in range(clip_len - 1)]
        s_aff = [build_affinity(q_s[j], q_s[j + 1], temps.student, j, j + 1)
                 for j in range(clip_len - 1)]
        aff_terms.append(loss_in_aff(t_aff, s_aff))

    def batch_mean(terms):
        if not terms:
            return zero_loss(dtype=t_cls.dtype)
        acc = terms[0]
        for term in terms[1:]:
            acc = add(acc, term)
        return scale(acc, 1.0 / batch)

    breakdown = total_loss(batch_mean(g2g_terms), batch_mean(l2g_terms),
                           batch_mean(mim_terms), batch_mean(aff_terms))
    lr = lr_at(step, opt_config)
    wd = wd_at(step, opt_config)

    if not np.isfinite(breakdown.total.data):
        return breakdown, lr, wd, bool(gated), False

    backward(breakdown.total)
    grads = {name: t.grad for name, t in student.named_parameters()}
    applied = adamw_step(student, grads, opt_state, lr, wd, opt_config)
    for _, t in student.named_parameters():
        t.zero_grad()
    if applied:
        ema_update(teacher, student)
        center_update(teacher, t_cls, t_patch)
    return breakdown, lr, wd, bool(gated), applied


@dataclass
class TrainResult:
    steps: int
    log_lines: list
    checkpoints: list
    log_path: Path
    aborted: bool = False


def train(run, resume=None, progress=None):
    """Run the full schedule; checkpoints land in run.out every epoch.

    resume: path to a checkpoint from the same config; steps already
    covered are skipped without drawing randomness, so a resumed run is
    bitwise identical to an uninterrupted one. Three consecutive
    non-finite steps abort."""
    data_root = Path(run.data)
    sources = load_store(data_root / "train")
    for source in sources:
        if source.has_masks:
            raise ValueError(
                f"training split must not carry masks: {source.directory}")

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    config_text = canonical_config_text(run)
    (out / "config.txt").write_text(config_text)

    rng = Rng(run.seed)
    student = EncoderParams.init(run.model, rng.substream("init"))
    teacher = TeacherState.from_student(student, run.ema_momentum,
                                        run.center_momentum)
    opt_state = OptState.init(student)
    start_step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config_text != config_text:
            raise ValueError("checkpoint was written under a different config")
        student, teacher, opt_state = restore_state(ckpt, run)
        start_step = ckpt.step

    steps_per_epoch = max(1, len(sources) // run.batch)
    opt_config = make_opt_config(run, steps_per_epoch)

    log_path = out / "train.log"
    log_lines = []
    checkpoints = []
    skip_streak = 0
    step = 0
    aborted = False
    with open(log_path, "a" if resume else "w") as log_fh:
        for epoch in range(run.epochs):
            order = rng.substream(f"epoch{epoch}").permutation(len(sources))
            for b in range(steps_per_epoch):
                if step < start_step:
                    step += 1
                    continue
                group = [sources[j] for j in order[b * run.batch:(b + 1) * run.batch]]
                breakdown, lr, wd, gated, applied = train_step(
                    step, group, student, teacher, run, opt_config, opt_state, rng)
                line = breakdown.log_line(step, lr, wd, gated)
                if not applied:
                    skip_streak += 1
                    line += "\tskipped"
                else:
                    skip_streak = 0
                log_fh.write(line + "\n")
                log_lines.append(line)
                if progress:
                    progress(step, breakdown)
                step += 1
                if skip_streak >= 3:
                    aborted = True
                    break
            if aborted:
                break
            every = run.checkpoint_every
            due = (every > 0 and (epoch + 1) % every == 0) or epoch == run.epochs - 1
            if due and step > start_step:
                path = save_checkpoint(out / f"checkpoint_{epoch:03d}.ckpt",
                                       student, teacher, opt_state, step,
                                       config_text)
                checkpoints.append(path)
    if aborted:
        raise RuntimeError("aborted after 3 consecutive non-finite steps "
                           f"(see {log_path})")
    return TrainResult(step, log_lines, checkpoints, log_path)


# -- evaluation ------------------------------------------------------------------


def evaluate(params, model_config, prop_config, eval_root, tolerance=None,
             backend=None):
    """Label propagation over every eval video, scored against the
    stored masks. Returns (SequenceScores, report text)."""
    sources = load_store(Path(eval_root))
    tracks = []
    for source in sources:
        if not source.has_masks:
            raise ValueError(f"{source.directory} carries no first-frame mask")
        if len(source.mask_paths) != len(source):
            raise ValueError(f"{source.directory}: need one mask per frame to score")
        frames = [source[i] for i in range(len(source))]
        features = [extract_inference_features(f, params, model_config).data
                    for f in frames]
        first_mask = source.mask(0)
        label_maps = propagate_video(features, first_mask, prop_config,
                                     backend=backend)
        pred = [labels_to_mask(lm, model_config.patch_size) for lm in label_maps]
        truth = [source.mask(i) for i in range(len(source))]
        for obj in range(1, int(first_mask.max()) + 1):
            tracks.append(score_track(pred, truth, obj,
                                      sequence=source.source_id,
                                      tolerance=tolerance))
    scores = aggregate(tracks)
    return scores, report(scores)


def propagate_and_save(params, model_config, prop_config, video_dir, out_dir,
                       backend=None):
    """Inference on one video directory: writes predicted mask_*.pgm."""
    from vidcorr.views import VideoSource, write_pgm

    source = VideoSource(video_dir)
    if not source.has_masks:
        raise ValueError(f"{video_dir} carries no first-frame mask")
    frames = [source[i] for i in range(len(source))]
    features = [extract_inference_features(f, params, model_config).data
                for f in frames]
    label_maps = propagate_video(features, source.mask(0), prop_config,
                                 backend=backend)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, lm in enumerate(label_maps):
        path = out_dir / f"mask_{i:05d}.pgm"
        write_pgm(path, labels_to_mask(lm, model_config.patch_size))
        paths.append(path)
    return paths
