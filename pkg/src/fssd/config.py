"""Run configuration: flat ``key = value`` text with ``#`` comments.

Unknown keys are rejected so that typos fail loudly. Every command writes
the fully resolved configuration next to its outputs.
"""

from dataclasses import dataclass, field

DEFAULTS = {
    "seed": "0",
    "out": "runs/default",
    # data
    "data.source": "synthetic",
    "data.dim": "32",
    "data.classes": "4",
    "data.amplitude": "0.2",
    "data.spread": "0.15",
    "data.ring_scale": "0.7",
    "data.antipodal": "1",
    "data.n_train": "2000",
    "data.n_in": "3000",
    "data.n_ood": "3000",
    "data.n_val": "1000",
    "data.train_images": "",
    "data.train_labels": "",
    "data.in_images": "",
    "data.in_labels": "",
    "data.ood_images": "",
    "data.ood_labels": "",
    "data.train_limit": "0",
    "data.in_limit": "0",
    "data.ood_limit": "0",
    # model
    "model.architecture": "mlp",
    "model.hidden": "64,64",
    "model.input_shape": "1,28,28",
    "model.conv_channels": "6,16",
    "model.kernel_size": "5",
    "model.padding": "0",
    "model.pool": "2",
    "model.fc_sizes": "120,84",
    # training
    "train.learning_rate": "0.002",
    "train.momentum": "0.9",
    "train.batch_size": "64",
    "train.epochs": "30",
    "train.snapshot_every": "40",
    # detectors
    "detector.noise_count": "1000",
    "detector.eps_grid": ",".join(f"{0.01 * i:.2f}" for i in range(21)),
    "detector.temperatures": "1,10,100,1000",
    "detector.c_grid": "0.01,0.1,1,10",
    "detector.mode": "layer",
    "detector.maha_train_limit": "5000",
    # robustness sweep
    "sweep.kinds": "gaussian,impulse",
    "sweep.levels": "0,1,2,3,4,5",
    "sweep.gaussian_sigmas": "0,0.02,0.05,0.1,0.2,0.3",
    "sweep.impulse_probs": "0,0.01,0.03,0.07,0.12,0.2",
    # dynamics probe
    "probe.tap": "",
    "probe.samples": "100",
    "probe.speed_batch": "512",
    "probe.kernel_samples": "10",
}


class ConfigError(ValueError):
    pass


def parse_text(text, origin="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    source: str = "<defaults>"

    @classmethod
    def from_text(cls, text, origin="<config>", overrides=None):
        given = parse_text(text, origin)
        given.update(overrides or {})
        unknown = sorted(set(given) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{origin}: unknown keys {unknown}")
        values = dict(DEFAULTS)
        values.update(given)
        return cls(values, origin)

    @classmethod
    def load(cls, path, overrides=None):
        try:
            with open(path) as fh:
                text = fh.read()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        return cls.from_text(text, str(path), overrides)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key):
        return self.values[key]

    def get_int(self, key):
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {self.values[key]!r}") from None

    def get_float(self, key):
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {self.values[key]!r}") from None

    def get_floats(self, key):
        try:
            return tuple(float(v) for v in self.values[key].split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers, got {self.values[key]!r}") from None

    def get_ints(self, key):
        try:
            return tuple(int(v) for v in self.values[key].split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {self.values[key]!r}") from None

    def get_strs(self, key):
        return tuple(v.strip() for v in self.values[key].split(",") if v.strip())

    def to_text(self):
        lines = [f"# resolved from {self.source}"]
        lines += [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())
