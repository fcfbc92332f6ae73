"""Run configuration: every tunable of extraction, training and evaluation."""
import dataclasses
import json

import unifeat.common
import unifeat.options


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated, JSON-serialisable run configuration.

    Field names are the keys accepted in config files and by `--set`.
    """

    # detection
    detector: str = 'gcdad'
    G: int = 6
    rel_threshold: float = 0.2
    nms_radius: int = 1
    edge_ratio: float = 10.0
    max_keypoints: int = 5000
    # reduction head
    drop_prob: float = 0.3
    dim_b2: int = 256
    dim_b3: int = 256
    # global descriptor
    gem_p: float = 3.0
    fpn_width: int = 256
    # losses
    margin_m: float = 0.5
    tau: float = 0.85
    lam: float = 0.1
    window: int = 3
    # training
    lr: float = 1e-3
    epochs: int = 100
    batch_tuples: int = 5
    epoch_size: int = 6000
    n_negatives: int = 5
    train_size: int = unifeat.options.default_train_size
    location_cap: int = 0
    freeze_policy: str = 'freeze_B2B3'
    seed: int = 0
    # network and extraction
    mode: str = 'teacher'
    backbone: str = unifeat.options.default_backbone
    backbone_weights: str = 'imagenet'

    def __post_init__(self):
        """Coerce types and check ranges."""
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if field.name == 'backbone_weights' and value is None:
                continue
            try:
                value = _coerce(field.type, value)
            except (TypeError, ValueError):
                raise unifeat.common.ConfigError(
                    "Value {!r} for '{}' is not a valid {}.".format(
                        value, field.name, field.type.__name__))
            object.__setattr__(self, field.name, value)
        self.validate()

    def validate(self):
        """Check every value lies in its allowed range.

        :raises: `unifeat.common.ConfigError`.
        """
        import unifeat.detector
        import unifeat.models
        checks = (
            ('detector', self.detector in unifeat.detector.detectors),
            ('G', self.G >= 1),
            ('rel_threshold', 0 < self.rel_threshold < 1),
            ('nms_radius', self.nms_radius >= 1),
            ('edge_ratio', self.edge_ratio > 1),
            ('max_keypoints', self.max_keypoints >= 1),
            ('drop_prob', 0 <= self.drop_prob < 1),
            ('dim_b2', self.dim_b2 >= 1),
            ('dim_b3', self.dim_b3 >= 1),
            ('gem_p', self.gem_p >= 1),
            ('fpn_width', self.fpn_width >= 1),
            ('margin_m', self.margin_m > 0),
            ('tau', self.tau > 0),
            ('lam', self.lam >= 0),
            ('window', self.window >= 1 and self.window % 2 == 1),
            ('lr', self.lr > 0),
            ('epochs', self.epochs >= 1),
            ('batch_tuples', self.batch_tuples >= 1),
            ('epoch_size', self.epoch_size >= 1),
            ('n_negatives', self.n_negatives >= 1),
            ('train_size', self.train_size >= unifeat.options.min_image_size),
            ('location_cap', self.location_cap >= 0),
            ('freeze_policy',
                self.freeze_policy in unifeat.options.freeze_policies),
            ('seed', self.seed >= 0),
            ('mode', self.mode in unifeat.options.extraction_modes),
            ('backbone', self.backbone in unifeat.models.backbone_specs))
        for name, ok in checks:
            if not ok:
                raise unifeat.common.ConfigError(
                    "Value {!r} is out of range for '{}'.".format(
                        getattr(self, name), name))

    def amend(self, **kwargs):
        """Create new `RunConfig` with some values changed.

        :raises: `unifeat.common.ConfigError` for unknown keys.
        """
        check_keys(kwargs)
        return dataclasses.replace(self, **kwargs)

    def to_dict(self):
        """Return a plain dictionary of all values."""
        return dataclasses.asdict(self)

    def to_json(self):
        """Canonical JSON text (sorted keys)."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n'

    @classmethod
    def from_dict(cls, values):
        """Create from a (possibly partial) dictionary."""
        check_keys(values)
        return cls(**values)

    @classmethod
    def from_json(cls, text):
        """Parse JSON text."""
        try:
            values = json.loads(text)
        except json.JSONDecodeError as e:
            raise unifeat.common.ConfigError(
                'Config is not valid JSON: {}'.format(e))
        if not isinstance(values, dict):
            raise unifeat.common.ConfigError(
                'Config must be a JSON object.')
        return cls.from_dict(values)

    @classmethod
    def from_file(cls, path):
        """Read a JSON config file."""
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        """Write canonical JSON to file."""
        with open(path, 'w') as fh:
            fh.write(self.to_json())


def _coerce(kind, value):
    if kind is bool:
        return bool(value)
    if kind is int:
        if isinstance(value, str):
            value = float(value)
        if isinstance(value, float) and not value.is_integer():
            raise ValueError('not an integer')
        return int(value)
    if kind is float:
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise TypeError('not a string')
        return value
    raise TypeError('unsupported type')


def check_keys(values):
    """Reject keys that are not `RunConfig` fields.

    :raises: `unifeat.common.ConfigError`.
    """
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise unifeat.common.ConfigError(
            'Unknown config key(s): {}.'.format(', '.join(unknown)))


def load_config(path=None, overrides=None):
    """Build a `RunConfig` from an optional file and override dictionary.

    :param path: JSON config file, or `None` for defaults.
    :param overrides: dict of key: value (string values are coerced).

    :returns: `RunConfig`.
    """
    config = RunConfig() if path is None else RunConfig.from_file(path)
    if overrides:
        overrides = dict(overrides)
        if overrides.get('backbone_weights') in ('None', 'none', ''):
            overrides['backbone_weights'] = None
        config = config.amend(**overrides)
    return config
