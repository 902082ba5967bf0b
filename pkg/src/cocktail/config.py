"""Run configuration as plain ``key = value`` text."""
from dataclasses import dataclass, fields

from cocktail.errors import ContractError


@dataclass
class RunConfig:
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # model
    latent_channels: int = 4
    widths: tuple = (32, 64, 96, 128)
    heads: int = 2
    n_tokens: int = 8
    context_dim: int = 64
    time_dim: int = 128
    control_hidden: int = 32
    # data
    n_train: int = 2000
    n_eval: int = 200
    eval_count: int = 64
    previews: int = 8
    # training
    pretrain_steps: int = 2000
    control_steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 1e-2
    prompt_drop: float = 0.1
    p_drop: float = 0.3
    log_every: int = 100
    # sampling
    steps: int = 50
    cfg_scale: float = 9.0
    omega_prime: float = 1.0
    guidance_variant: str = "formula-literal"
    clip_sample: bool = True
    eval_batch: int = 32
    # seeds
    seed: int = 0
    backbone_seed: int = 0
    control_seed: int = 1
    data_seed: int = 0
    # paths
    out: str = "runs/default"

    def render(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            if isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    @classmethod
    def parse(cls, text):
        kinds = {f.name: type(f.default) for f in fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {n}: expected 'key = value'")
            key, _, raw = (s.strip() for s in line.partition("="))
            if key not in kinds:
                raise ContractError(f"config line {n}: unknown key {key!r}")
            kind = kinds[key]
            try:
                if kind is bool:
                    values[key] = {"true": True, "false": False}[raw.lower()]
                elif kind is tuple:
                    values[key] = tuple(int(x) for x in raw.split(","))
                else:
                    values[key] = kind(raw)
            except (ValueError, KeyError):
                raise ContractError(f"config line {n}: bad value {raw!r} for {key}") from None
        return cls(**values).validate()

    @classmethod
    def read(cls, path):
        with open(path) as f:
            return cls.parse(f.read())

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.render())

    def validate(self):
        for key in ("n_train", "n_eval", "eval_count", "batch_size", "steps", "T"):
            if getattr(self, key) < 1:
                raise ContractError(f"{key} must be at least 1")
        if self.eval_count > self.n_eval:
            raise ContractError("eval_count exceeds n_eval")
        if not 0 <= self.p_drop < 1 or not 0 <= self.prompt_drop < 1:
            raise ContractError("drop probabilities must lie in [0, 1)")
        return self

    def unet_config(self):
        from cocktail.backbone import UNetConfig
        from cocktail.synthdata import VOCAB
        return UNetConfig(latent_channels=self.latent_channels, widths=self.widths, heads=self.heads,
                          n_tokens=self.n_tokens, vocab_size=max(64, len(VOCAB)),
                          context_dim=self.context_dim, time_dim=self.time_dim)

    def schedule(self):
        from cocktail.backbone import NoiseSchedule
        return NoiseSchedule.linear(self.T, self.beta_start, self.beta_end)
