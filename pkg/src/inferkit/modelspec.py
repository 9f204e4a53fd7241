"""Model specification files.

A model is described by choosing one option per atomic building block
(network type, normalization, activation, position embedding, ...) in a small
UTF-8 key/value document::

    model_file_format = native
    tokenizer_file = builtin:bytes
    tokenization_algorithm = bpe
    generation_config:
        strategy = top_p
        top_p = 0.9
    network_structure:
        type = decoder_only
        normalization_function = rms
        activation_function = silu
        position_embedding = rope
        decoder_heads = 8
        decoder_kv_heads = 2
        layers = 2
        hidden_dim = 32
        ffn_dim = 64
        vocab_size = 259
        max_context = 64
        tensor_name_prefix = model.
        tensor_name_mapping:
            layers.{n}.self_attn.q_proj.weight => layers.{n}.attn.q.weight

Comments start with ``#``.  Subsection keys are indented under a header line
ending in ``:``.  In mapping rules ``{x}`` matches a run of digits and
``{x:*}`` matches any text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SpecError, UnmappedTensorError, UnsupportedBlockError

ENUMS = {
    "model_file_format": ("native", "safetensors"),
    "tokenization_algorithm": ("bpe", "char"),
    "type": ("decoder_only", "encoder_only", "encoder_decoder"),
    "normalization_function": ("rms", "std"),
    "activation_function": ("silu", "relu", "gelu"),
    "position_embedding": ("rope", "sinusoidal", "empty"),
}

TOP_LEVEL = ("model_file_format", "tokenizer_file", "tokenizer_merges_file", "tokenization_algorithm")
NETWORK_INT = (
    "decoder_heads", "decoder_kv_heads", "layers", "encoder_layers",
    "hidden_dim", "ffn_dim", "vocab_size", "max_context", "qk_column_order", "qkv_format",
)
NETWORK_STR = ("type", "normalization_function", "activation_function", "position_embedding", "tensor_name_prefix")
REQUIRED = (
    "type", "normalization_function", "activation_function", "position_embedding",
    "decoder_heads", "layers", "hidden_dim", "ffn_dim", "vocab_size", "max_context",
)


@dataclass(frozen=True)
class MappingRule:
    pattern: str
    target: str

    def regex(self) -> re.Pattern:
        out, pos = [], 0
        for m in re.finditer(r"\{(\w+)(:\*)?\}", self.pattern):
            out.append(re.escape(self.pattern[pos : m.start()]))
            out.append(f"(?P<{m.group(1)}>.+?)" if m.group(2) else f"(?P<{m.group(1)}>\\d+)")
            pos = m.end()
        out.append(re.escape(self.pattern[pos:]))
        return re.compile("".join(out) + r"\Z")

    def apply(self, name: str) -> str | None:
        m = self.regex().match(name)
        if m is None:
            return None
        return re.sub(r"\{(\w+)(:\*)?\}", lambda g: m.group(g.group(1)), self.target)


@dataclass(frozen=True)
class ModelSpec:
    network_type: str
    normalization_function: str
    activation_function: str
    position_embedding: str
    decoder_heads: int
    layers: int
    hidden_dim: int
    ffn_dim: int
    vocab_size: int
    max_context: int
    decoder_kv_heads: int | None = None
    encoder_layers: int | None = None
    model_file_format: str = "native"
    tokenizer_file: str = "builtin:bytes"
    tokenizer_merges_file: str | None = None
    tokenization_algorithm: str = "bpe"
    qk_column_order: int = 2
    qkv_format: int | None = None
    tensor_name_prefix: str = ""
    tensor_name_mapping: tuple[MappingRule, ...] = ()
    generation_config: tuple[tuple[str, str], ...] = ()
    source_dir: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.decoder_kv_heads is None:
            object.__setattr__(self, "decoder_kv_heads", self.decoder_heads)

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.decoder_heads

    @property
    def n_encoder_layers(self) -> int:
        if self.network_type == "encoder_only":
            return self.layers
        if self.network_type == "encoder_decoder":
            return self.encoder_layers or 0
        return 0

    @property
    def n_decoder_layers(self) -> int:
        return 0 if self.network_type == "encoder_only" else self.layers

    @property
    def gqa_enabled(self) -> bool:
        return self.decoder_kv_heads < self.decoder_heads

    def generation_defaults(self) -> dict[str, str]:
        return dict(self.generation_config)

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.source_dir:
            path = Path(self.source_dir) / path
        return path


def _check_enum(key: str, value: str) -> str:
    if value not in ENUMS[key]:
        raise UnsupportedBlockError(key, value)
    return value


def _int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise SpecError(f"{key}: expected an integer, got {value!r}") from None


def _lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if line.strip():
            yield lineno, len(line) - len(line.lstrip()), line.strip()


def parse_spec(text: str, source_dir: str | None = None) -> ModelSpec:
    """Parse a specification document; unknown keys and enum values are rejected."""
    top: dict[str, str] = {}
    net: dict[str, str] = {}
    gen: list[tuple[str, str]] = []
    rules: list[MappingRule] = []
    section: str | None = None
    section_indent = 0

    for lineno, indent, line in _lines(text):
        if indent == 0:
            section = None
        elif section is None:
            raise SpecError(f"line {lineno}: unexpected indentation")
        if section == "tensor_name_mapping" and indent <= section_indent:
            section = "network_structure"
        if line.endswith(":") and "=" not in line:
            name = line[:-1].strip()
            if indent == 0 and name in ("network_structure", "generation_config"):
                section, section_indent = name, 0
            elif section == "network_structure" and name == "tensor_name_mapping":
                section, section_indent = "tensor_name_mapping", indent
            else:
                raise SpecError(f"line {lineno}: unknown section {name!r}")
            continue
        if section == "tensor_name_mapping":
            if "=>" not in line:
                raise SpecError(f"line {lineno}: mapping rules look like 'pattern => canonical'")
            src, dst = (s.strip() for s in line.split("=>", 1))
            rules.append(MappingRule(src, dst))
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            if key not in TOP_LEVEL:
                raise SpecError(f"line {lineno}: unknown key {key!r}")
            top[key] = value
        elif section == "generation_config":
            gen.append((key, value))
        else:
            if key not in NETWORK_INT and key not in NETWORK_STR:
                raise SpecError(f"line {lineno}: unknown key {key!r}")
            net[key] = value

    missing = [k for k in REQUIRED if k not in net]
    if missing:
        raise SpecError(f"missing required key(s): {', '.join(missing)}")

    kwargs = {}
    for key in ("model_file_format", "tokenization_algorithm"):
        if key in top:
            kwargs[key] = _check_enum(key, top[key])
    for key in ("tokenizer_file", "tokenizer_merges_file"):
        if key in top:
            kwargs[key] = top[key]
    for key in NETWORK_STR:
        if key in net:
            if key == "tensor_name_prefix":
                kwargs[key] = net[key]
            else:
                kwargs["network_type" if key == "type" else key] = _check_enum(key, net[key])
    for key in NETWORK_INT:
        if key in net:
            kwargs[key] = _int(key, net[key])
    return ModelSpec(
        **kwargs,
        tensor_name_mapping=tuple(rules),
        generation_config=tuple(gen),
        source_dir=source_dir,
    )


def print_spec(spec: ModelSpec) -> str:
    """Render a spec in the grammar accepted by :func:`parse_spec`."""
    out = [
        f"model_file_format = {spec.model_file_format}",
        f"tokenizer_file = {spec.tokenizer_file}",
    ]
    if spec.tokenizer_merges_file:
        out.append(f"tokenizer_merges_file = {spec.tokenizer_merges_file}")
    out.append(f"tokenization_algorithm = {spec.tokenization_algorithm}")
    if spec.generation_config:
        out.append("generation_config:")
        out += [f"    {k} = {v}" for k, v in spec.generation_config]
    out.append("network_structure:")
    net = {
        "type": spec.network_type,
        "normalization_function": spec.normalization_function,
        "activation_function": spec.activation_function,
        "position_embedding": spec.position_embedding,
        "qk_column_order": spec.qk_column_order,
        "qkv_format": spec.qkv_format,
        "decoder_heads": spec.decoder_heads,
        "decoder_kv_heads": spec.decoder_kv_heads,
        "layers": spec.layers,
        "encoder_layers": spec.encoder_layers,
        "hidden_dim": spec.hidden_dim,
        "ffn_dim": spec.ffn_dim,
        "vocab_size": spec.vocab_size,
        "max_context": spec.max_context,
        "tensor_name_prefix": spec.tensor_name_prefix,
    }
    for k, v in net.items():
        if v is not None and not (k == "tensor_name_prefix" and v == ""):
            out.append(f"    {k} = {v}")
    if spec.tensor_name_mapping:
        out.append("    tensor_name_mapping:")
        out += [f"        {r.pattern} => {r.target}" for r in spec.tensor_name_mapping]
    return "\n".join(out) + "\n"


def validate_spec(spec: ModelSpec) -> list[str]:
    """Return one ``"field: rule"`` string per violated invariant."""
    v = []
    for f in ("decoder_heads", "decoder_kv_heads", "layers", "hidden_dim", "ffn_dim", "vocab_size", "max_context"):
        if getattr(spec, f) < 1:
            v.append(f"{f}: must be a positive integer")
    h, g = spec.decoder_heads, spec.decoder_kv_heads
    if h >= 1 and g >= 1:
        if g > h:
            v.append("decoder_kv_heads: kv_heads must not exceed heads")
        elif h % g:
            v.append("decoder_kv_heads: kv_heads must divide heads")
    if h >= 1 and spec.hidden_dim % h:
        v.append("hidden_dim: must be divisible by decoder_heads")
    elif h >= 1 and spec.position_embedding == "rope" and spec.head_dim % 2:
        v.append("hidden_dim: per-head dim must be even for rope")
    if spec.network_type == "encoder_decoder" and not spec.encoder_layers:
        v.append("encoder_layers: encoder_decoder specs must name encoder and decoder layer counts")
    if spec.qk_column_order not in (1, 2):
        v.append("qk_column_order: must be 1 (half-split) or 2 (interleaved)")
    if spec.qkv_format not in (None, 0, 1):
        v.append("qkv_format: must be 0 or 1")
    return v


def load_spec(path) -> ModelSpec:
    """Read, parse and validate a spec file; raise on any violation."""
    path = Path(path)
    spec = parse_spec(path.read_text(encoding="utf-8"), source_dir=str(path.parent))
    problems = validate_spec(spec)
    if problems:
        raise SpecError("invalid model spec: " + "; ".join(problems))
    return spec


def resolve_tensor_name(spec: ModelSpec, external: str) -> str:
    """Map an external checkpoint name to its canonical layer-indexed name."""
    name = external
    if spec.tensor_name_prefix and name.startswith(spec.tensor_name_prefix):
        name = name[len(spec.tensor_name_prefix) :]
    if not spec.tensor_name_mapping:
        return name
    for rule in spec.tensor_name_mapping:
        out = rule.apply(name)
        if out is not None:
            return out
    raise UnmappedTensorError(external)
