"""Training orchestration: stage-two steps, the toy stage-one prior run,
checkpointing and the stylize entry point.

Determinism contract: every random draw is keyed by (seed, purpose, step),
so a fixed seed reproduces loss trajectories exactly and a resumed run
continues the identical sequence.
"""

import os
import sys
import time

import torch

from .config import TrainConfig, format_config, parse_config
from .container import load_container, save_container
from .data import DataPipeline, list_images, load_image, seeded_generator
from .errors import ConfigError, NonFiniteLossError
from .feature_codec import Decoder, Encoder, load_encoder_weights
from .lgwssm import Stylizer
from .losses import (
    Discriminator,
    LossReport,
    content_loss,
    discriminator_loss,
    generator_adversarial_loss,
    identity_loss_from_parts,
    style_loss,
    total_loss,
)
from .style_prior import (
    AvgPoolCodec,
    NoiseSchedule,
    StylePrior,
    add_noise,
    build_schedule,
    load_prior,
    resize_image,
    save_prior,
    style_prior_loss,
)

CHECKPOINT_FILE_TYPE = "spast.checkpoint"


def seeded_init_(module: torch.nn.Module, gen: torch.Generator) -> None:
    """Deterministic fan-in uniform init for weights, zeros for vectors."""
    for p in module.parameters():
        with torch.no_grad():
            if p.dim() >= 2:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.dim() == 4 else 1)
                bound = fan_in**-0.5
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()


class TrainState:
    """Everything one training run owns. Single-writer: parameter updates
    must not run concurrently."""

    def __init__(self, config, encoder, decoder, stylizer, discriminator, prior, schedule):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.stylizer = stylizer
        self.discriminator = discriminator
        self.prior = prior
        self.codec = AvgPoolCodec()
        self.schedule = schedule
        self.step = 0
        self.opt_g = torch.optim.Adam(self.generator_parameters(), lr=config.lr)
        self.opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr)

    def generator_parameters(self) -> list:
        params = []
        if self.encoder.provenance != "pretrained-file":
            params += list(self.encoder.parameters())
        params += list(self.decoder.parameters())
        params += list(self.stylizer.parameters())
        return params


def init_state(cfg: TrainConfig, prior: StylePrior | None = None) -> TrainState:
    cfg.validate()
    torch.set_flush_denormal(True)
    gen = seeded_generator(cfg.seed, "init")
    if cfg.encoder_weights:
        encoder = load_encoder_weights(cfg.encoder_weights)
        for p in encoder.parameters():
            p.requires_grad_(False)
    else:
        encoder = Encoder()
        seeded_init_(encoder, gen)
    decoder = Decoder()
    seeded_init_(decoder, gen)
    stylizer = Stylizer(cfg.levels, cfg.b, cfg.use_local, cfg.use_global)
    stylizer.reset_parameters(gen)
    discriminator = Discriminator()
    seeded_init_(discriminator, gen)
    schedule = prior.schedule if prior is not None else build_schedule(
        cfg.prior.total_steps, cfg.prior.beta_min, cfg.prior.beta_max
    )
    return TrainState(cfg, encoder, decoder, stylizer, discriminator, prior, schedule)


def stylize(state: TrainState, content_img: torch.Tensor, style_img: torch.Tensor) -> torch.Tensor:
    """Full pipeline: encode both images, fuse at the configured levels,
    decode. Output dimensions equal the content image's."""
    pyr_c = state.encoder(content_img)
    pyr_s = state.encoder(style_img)
    return state.decoder(state.stylizer(pyr_c, pyr_s))


def _clip_gradients(params, max_norm: float) -> None:
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], max_norm)


def _pick_timestep(cfg: TrainConfig, schedule: NoiseSchedule, step: int) -> int:
    if cfg.prior.sample_t:
        gen = seeded_generator(cfg.seed, "timestep", step)
        return int(torch.randint(1, schedule.total_steps + 1, (1,), generator=gen))
    return cfg.prior.t_fixed


def stage_two_step(state: TrainState, content_img, style_img) -> LossReport:
    """One full training step: stylize, compute all objective terms, update
    the discriminator, then update the generator. Strict D-then-G
    alternation; the frozen prior only contributes gradients to the
    generator. Accepts single images or equal-length lists (a batch); batch
    terms are averaged before the updates."""
    cfg = state.config
    w = cfg.weights
    contents = list(content_img) if isinstance(content_img, (list, tuple)) else [content_img]
    styles = list(style_img) if isinstance(style_img, (list, tuple)) else [style_img]
    n = len(contents)

    stylized = []
    l_content = l_style = l_identity = 0.0
    for ic, istyle in zip(contents, styles):
        pyr_c, pyr_s = state.encoder.encode_batch([ic, istyle])
        fused_cs = state.stylizer(pyr_c, pyr_s)
        fused_cc = state.stylizer(pyr_c, pyr_c)
        fused_ss = state.stylizer(pyr_s, pyr_s)
        i_cs, i_cc, i_ss = state.decoder.decode_batch([fused_cs, fused_cc, fused_ss])
        with torch.no_grad():
            for name, img in (("stylized", i_cs), ("content-identity", i_cc), ("style-identity", i_ss)):
                if not torch.isfinite(img).all():
                    raise NonFiniteLossError(
                        f"{name} image is non-finite at step {state.step + 1}; aborting before the loss terms"
                    )
        stylized.append(i_cs)

        # measurement pyramids: gradients reach the generated images but
        # never the encoder weights, so the joint-trained encoder cannot
        # collapse the metric it is measured by (it learns through the
        # reconstruction branch instead)
        m_cs, m_cc, m_ss = state.encoder.encode_batch([i_cs, i_cc, i_ss], detach_params=True)
        m_c = {k: v.detach() for k, v in pyr_c.items()}
        m_s = {k: v.detach() for k, v in pyr_s.items()}

        l_content = l_content + content_loss(m_cs, m_c) / n
        l_style = l_style + style_loss(m_cs, m_s) / n
        l_identity = l_identity + identity_loss_from_parts(
            i_cc, i_ss, ic, istyle, m_cc, m_ss, m_c, m_s, w
        ) / n

    if w.adversarial > 0:
        state.opt_d.zero_grad(set_to_none=True)
        d_loss = sum(
            discriminator_loss(state.discriminator, istyle, i_cs)
            for istyle, i_cs in zip(styles, stylized)
        ) / n
        d_loss.backward()
        _clip_gradients(state.discriminator.parameters(), cfg.grad_clip)
        state.opt_d.step()
        l_adv = sum(generator_adversarial_loss(state.discriminator, i_cs) for i_cs in stylized) / n
    else:
        l_adv = torch.zeros(())

    if w.style_prior > 0 and state.prior is not None:
        t = _pick_timestep(cfg, state.schedule, state.step)
        proxy = surrogate = 0.0
        for j, (istyle, i_cs) in enumerate(zip(styles, stylized)):
            gen = seeded_generator(cfg.seed, "prior-noise", state.step, j)
            p, s = style_prior_loss(
                state.prior,
                state.codec,
                state.schedule,
                i_cs,
                istyle,
                t=t,
                include_jacobian=cfg.prior.include_jacobian,
                generator=gen,
            )
            proxy = proxy + p / n
            surrogate = surrogate + s / n
    else:
        proxy, surrogate = torch.zeros(()), torch.zeros(())

    report = LossReport(
        step=state.step + 1,
        content=float(l_content.detach()),
        style=float(l_style.detach()),
        identity=float(l_identity.detach()),
        adversarial=float(l_adv.detach()),
        style_prior=float(proxy),
    )
    total_loss(report, w)  # validates finiteness, fills report.total

    objective = (
        w.style * l_style
        + w.content * l_content
        + w.identity * l_identity
        + w.adversarial * l_adv
        + w.style_prior * surrogate
    )
    state.opt_g.zero_grad(set_to_none=True)
    objective.backward()
    _clip_gradients(state.generator_parameters(), cfg.grad_clip)
    state.opt_g.step()

    state.step += 1
    return report


def train(
    cfg: TrainConfig,
    resume: str | None = None,
    log_path: str | None = None,
    quiet: bool = False,
) -> list:
    """Run stage two to ``cfg.iterations`` steps; returns all LossReports."""
    cfg.validate()
    if resume:
        state = load_checkpoint(resume)
        cfg = state.config
    else:
        state = init_state(cfg, _prior_for(cfg))
    pipeline = DataPipeline(cfg.content_dir, cfg.style_dir, cfg.resize, cfg.crop, cfg.seed)

    if log_path is None and cfg.out_dir:
        log_path = os.path.join(cfg.out_dir, "losses.jsonl")
    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None

    reports = []
    started = time.time()
    try:
        while state.step < cfg.iterations:
            pairs = [pipeline.sample(state.step, j) for j in range(cfg.batch)]
            if cfg.batch == 1:
                report = stage_two_step(state, pairs[0][0], pairs[0][1])
            else:
                report = stage_two_step(state, [p[0] for p in pairs], [p[1] for p in pairs])
            reports.append(report)
            if log_fh:
                log_fh.write(report.to_json() + "\n")
            if not quiet and state.step % cfg.log_every == 0:
                rate = state.step / max(time.time() - started, 1e-9)
                print(
                    f"step {state.step}/{cfg.iterations} total={report.total:.3f} ({rate:.2f} it/s)",
                    file=sys.stderr,
                )
    finally:
        if log_fh:
            log_fh.close()
    if cfg.out_dir:
        save_checkpoint(state, os.path.join(cfg.out_dir, "checkpoint.spast"))
    return reports


def _prior_for(cfg: TrainConfig) -> StylePrior | None:
    if cfg.weights.style_prior <= 0:
        return None
    if cfg.prior.use_untrained:
        gen = seeded_generator(cfg.seed, "untrained-prior")
        encoder = Encoder()
        seeded_init_(encoder, gen)
        schedule = build_schedule(cfg.prior.total_steps, cfg.prior.beta_min, cfg.prior.beta_max)
        prior = StylePrior(
            encoder, schedule,
            embed_dim=cfg.prior.embed_dim, hidden=cfg.prior.hidden,
            resolution=cfg.prior.resolution, run_id="untrained",
        )
        seeded_init_(prior.embedder, gen)
        seeded_init_(prior.denoiser, gen)
        return prior.freeze()
    if not cfg.prior.ckpt:
        raise ConfigError("loss.style_prior > 0 needs prior.ckpt (or prior.use_untrained=true)")
    if not os.path.exists(cfg.prior.ckpt):
        raise FileNotFoundError(f"prior checkpoint not found: {cfg.prior.ckpt}")
    return load_prior(cfg.prior.ckpt, frozen=True)


def train_prior(cfg: TrainConfig, quiet: bool = False) -> tuple:
    """Toy stage one: train the conditional denoiser (and embedding head)
    to reconstruct noise on latent style images. Returns (prior, history)
    where history is a list of per-step reconstruction losses."""
    cfg.validate()
    torch.set_flush_denormal(True)
    pcfg = cfg.prior
    gen = seeded_generator(cfg.seed, "prior-init")
    encoder = Encoder()
    seeded_init_(encoder, gen)
    schedule = build_schedule(pcfg.total_steps, pcfg.beta_min, pcfg.beta_max)
    run_id = f"prior-seed{cfg.seed}-steps{pcfg.train_steps}"
    prior = StylePrior(
        encoder, schedule,
        embed_dim=pcfg.embed_dim, hidden=pcfg.hidden,
        resolution=pcfg.resolution, run_id=run_id,
    )
    seeded_init_(prior.embedder, gen)
    seeded_init_(prior.denoiser, gen)

    files = list_images(cfg.style_dir)
    if not files:
        raise FileNotFoundError(f"no style images in {cfg.style_dir}")
    codec = AvgPoolCodec()
    images = [resize_image(load_image(f), pcfg.resolution) for f in files]
    with torch.no_grad():
        feats = [prior.encoder(img)["relu4_1"] for img in images]
        latents = [codec.encode(img) for img in images]

    trainable = list(prior.embedder.parameters())
    if not pcfg.freeze_denoiser:
        trainable += list(prior.denoiser.parameters())
    opt = torch.optim.Adam(trainable, lr=pcfg.lr)

    history = []
    started = time.time()
    for step in range(pcfg.train_steps):
        g = seeded_generator(cfg.seed, "prior-train", step)
        i = int(torch.randint(0, len(images), (1,), generator=g))
        t = int(torch.randint(1, schedule.total_steps + 1, (1,), generator=g))
        eps = torch.empty_like(latents[i]).normal_(generator=g)
        z_t = add_noise(latents[i], t, eps, schedule)
        embedding = prior.embed_features(feats[i])
        loss = ((eps - prior.predict(z_t, embedding, t)) ** 2).sum()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if not quiet and (step + 1) % 500 == 0:
            rate = (step + 1) / max(time.time() - started, 1e-9)
            print(f"prior step {step + 1}/{pcfg.train_steps} loss={history[-1]:.3f} ({rate:.1f} it/s)", file=sys.stderr)

    prior.freeze()
    if pcfg.ckpt:
        save_prior(pcfg.ckpt, prior)
    return prior, history


def save_checkpoint(state: TrainState, path) -> None:
    """Persist the complete training state in the binary container."""
    tensors = {}
    for prefix, module in (
        ("encoder", state.encoder),
        ("decoder", state.decoder),
        ("stylizer", state.stylizer),
        ("discriminator", state.discriminator),
    ):
        for name, value in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = value
    extra = {
        "config": format_config(state.config),
        "step": state.step,
        "encoder_provenance": state.encoder.provenance,
        "encoder_run_id": state.encoder.run_id,
    }
    if state.prior is not None:
        for name, value in state.prior.state_dict().items():
            tensors[f"prior.{name}"] = value
        tensors["prior.schedule.betas"] = state.prior.schedule.betas
        extra["prior_meta"] = {
            "embed_dim": state.prior.embed_dim,
            "hidden": state.prior.hidden,
            "resolution": state.prior.resolution,
            "run_id": state.prior.run_id,
        }
    _flatten_optimizer(state.opt_g, "optg", tensors, extra)
    _flatten_optimizer(state.opt_d, "optd", tensors, extra)
    tensors["rng.torch"] = torch.get_rng_state()
    save_container(path, CHECKPOINT_FILE_TYPE, tensors, extra)


def load_checkpoint(path) -> TrainState:
    """Restore a checkpoint; checksum failures raise before any state is
    touched, so there is never a partially-restored run."""
    _, tensors, extra = load_container(path, expected_type=CHECKPOINT_FILE_TYPE)
    cfg = parse_config(extra["config"])

    prior = None
    if "prior_meta" in extra:
        meta = extra["prior_meta"]
        betas = tensors.pop("prior.schedule.betas")
        schedule = NoiseSchedule(betas, torch.cumprod(1.0 - betas, dim=0))
        prior = StylePrior(
            Encoder(), schedule,
            embed_dim=meta["embed_dim"], hidden=meta["hidden"],
            resolution=meta["resolution"], run_id=meta["run_id"],
        )
        prior.load_state_dict(
            {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith("prior.")}
        )
        prior.freeze()

    state = init_state(cfg, prior)
    for prefix, module in (
        ("encoder", state.encoder),
        ("decoder", state.decoder),
        ("stylizer", state.stylizer),
        ("discriminator", state.discriminator),
    ):
        module.load_state_dict(
            {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        )
    state.encoder.provenance = extra["encoder_provenance"]
    state.encoder.run_id = extra["encoder_run_id"]
    _unflatten_optimizer(state.opt_g, "optg", tensors, extra)
    _unflatten_optimizer(state.opt_d, "optd", tensors, extra)
    state.step = extra["step"]
    torch.set_rng_state(tensors["rng.torch"])
    return state


def _flatten_optimizer(opt, prefix: str, tensors: dict, extra: dict) -> None:
    sd = opt.state_dict()
    extra[f"{prefix}_groups"] = sd["param_groups"]
    for idx, st in sd["state"].items():
        for key, value in st.items():
            tensors[f"{prefix}.state.{idx}.{key}"] = value if torch.is_tensor(value) else torch.tensor(value)


def _unflatten_optimizer(opt, prefix: str, tensors: dict, extra: dict) -> None:
    state: dict = {}
    marker = f"{prefix}.state."
    for name, value in tensors.items():
        if name.startswith(marker):
            idx, key = name[len(marker) :].split(".", 1)
            state.setdefault(int(idx), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": extra[f"{prefix}_groups"]})
