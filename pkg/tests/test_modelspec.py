"""Spec parsing/validation, tensor name resolution and the BPE tokenizer."""

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inferkit.cli import data_path
from inferkit.errors import SpecError, UnmappedTensorError, UnsupportedBlockError
from inferkit.modelspec import (
    MappingRule,
    load_spec,
    parse_spec,
    print_spec,
    resolve_tensor_name,
    validate_spec,
)
from inferkit.tokenizer import (
    Tokenizer,
    bpe_decode,
    bpe_encode,
    byte_vocab,
    load_vocab,
    save_vocab,
    train_bpe,
)
from conftest import make_spec

BUNDLED = ["mistral_style.spec", "m2m100_style.spec", "bert_style.spec", "tiny.spec"]

MINIMAL = """
network_structure:
    type = decoder_only
    normalization_function = rms
    activation_function = {act}
    position_embedding = rope
    decoder_heads = 4
    layers = 1
    hidden_dim = 16
    ffn_dim = 32
    vocab_size = 259
    max_context = 16
"""


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_specs_load_and_roundtrip(name):
    spec = load_spec(data_path(name))
    assert validate_spec(spec) == []
    assert parse_spec(print_spec(spec)) == spec


def test_mistral_style():
    spec = load_spec(data_path("mistral_style.spec"))
    assert (spec.network_type, spec.normalization_function, spec.activation_function, spec.position_embedding) == (
        "decoder_only", "rms", "silu", "rope")
    assert spec.gqa_enabled


def test_bert_style():
    spec = load_spec(data_path("bert_style.spec"))
    assert (spec.network_type, spec.normalization_function, spec.activation_function, spec.position_embedding) == (
        "encoder_only", "std", "gelu", "empty")


def test_generation_config_kept():
    spec = load_spec(data_path("mistral_style.spec"))
    assert spec.generation_defaults()["strategy"] == "top_p"


def test_unsupported_block():
    with pytest.raises(UnsupportedBlockError, match="unsupported building block: activation_function"):
        parse_spec(MINIMAL.format(act="tanh"))


@pytest.mark.parametrize(
    "text,msg",
    [
        (MINIMAL.format(act="silu").replace("    layers = 1\n", ""), "missing required"),
        (MINIMAL.format(act="silu") + "    colour = red\n", "unknown key"),
        ("bogus = 1\n" + MINIMAL.format(act="silu"), "unknown key"),
        (MINIMAL.format(act="silu").replace("layers = 1", "layers = one"), "expected an integer"),
        ("  indented = 1\n", "unexpected indentation"),
        (MINIMAL.format(act="silu") + "    tensor_name_mapping:\n        no arrow here\n", "mapping rules"),
    ],
)
def test_parse_errors(text, msg):
    with pytest.raises(SpecError, match=msg):
        parse_spec(text)


@pytest.mark.parametrize(
    "changes,violation",
    [
        (dict(decoder_heads=32, decoder_kv_heads=8, hidden_dim=256), None),
        (dict(decoder_heads=32, decoder_kv_heads=32, hidden_dim=256), None),
        (dict(decoder_heads=32, decoder_kv_heads=5, hidden_dim=256), "kv_heads must divide heads"),
        (dict(decoder_heads=4, decoder_kv_heads=8), "must not exceed"),
        (dict(hidden_dim=30), "divisible by decoder_heads"),
        (dict(decoder_heads=4, hidden_dim=12), "even for rope"),
        (dict(network_type="encoder_decoder"), "encoder and decoder layer counts"),
        (dict(layers=0), "layers: must be a positive integer"),
    ],
)
def test_validate(changes, violation):
    problems = validate_spec(make_spec(**changes))
    if violation is None:
        assert problems == []
    else:
        assert any(violation in p for p in problems), problems


def test_resolve_with_prefix_and_rule():
    spec = replace(
        make_spec(), tensor_name_prefix="model.",
        tensor_name_mapping=(MappingRule("layers.{n}.self_attn.q_proj.weight", "layers.{n}.attn.q.weight"),),
    )
    assert resolve_tensor_name(spec, "model.layers.0.self_attn.q_proj.weight") == "layers.0.attn.q.weight"
    with pytest.raises(UnmappedTensorError):
        resolve_tensor_name(spec, "model.layers.0.mlp.gate.weight")


def test_resolve_bert_unmapped():
    spec = load_spec(data_path("bert_style.spec"))
    assert resolve_tensor_name(spec, "bert.encoder.layer.1.output.LayerNorm.bias") == "encoder.layers.1.ffn_norm.bias"
    with pytest.raises(UnmappedTensorError, match="bert.pooler.dense.weight"):
        resolve_tensor_name(spec, "bert.pooler.dense.weight")


def test_m2m100_rules_separate_encoder_and_decoder():
    spec = load_spec(data_path("m2m100_style.spec"))
    pairs = {
        "model.encoder.layers.1.self_attn.qkv_proj.weight": "encoder.layers.1.attn.qkv.weight",
        "model.decoder.layers.1.self_attn.qkv_proj.weight": "layers.1.attn.qkv.weight",
        "model.decoder.layers.0.encoder_attn.k_proj.weight": "layers.0.cross.k.weight",
        "model.decoder.layers.0.encoder_attn.out_proj.weight": "layers.0.cross.o.weight",
        "model.encoder.layers.0.fc2.weight": "encoder.layers.0.ffn.down.weight",
        "model.decoder.layer_norm.bias": "final_norm.bias",
        "model.shared.weight": "embed.weight",
    }
    for ext, canon in pairs.items():
        assert resolve_tensor_name(spec, ext) == canon


def test_digit_placeholder_needs_digits():
    rule = MappingRule("layers.{n}.w", "L{n}")
    assert rule.apply("layers.12.w") == "L12"
    assert rule.apply("layers.x.w") is None


# -- tokenizer -----------------------------------------------------------------


def test_empty_string():
    assert bpe_encode(byte_vocab(), "") == []


def test_no_merges_one_id_per_byte():
    text = "héllo"
    assert bpe_encode(byte_vocab(), text) == list(text.encode("utf-8"))


def test_merges_shorten_and_roundtrip():
    vocab = train_bpe("the cat sat on the mat " * 20, 30)
    ids = bpe_encode(vocab, "the cat")
    assert len(ids) < len("the cat")
    assert bpe_decode(vocab, ids) == "the cat"


def test_random_ascii_roundtrip():
    vocab = train_bpe("lorem ipsum dolor sit amet, consectetur adipiscing elit " * 5, 40)
    rnd = random.Random(3)
    for _ in range(1000):
        text = "".join(chr(rnd.randrange(32, 127)) for _ in range(rnd.randrange(0, 40)))
        assert bpe_decode(vocab, bpe_encode(vocab, text)) == text


@given(st.text(max_size=30))
@settings(max_examples=200, deadline=None)
def test_unicode_roundtrip(text):
    vocab = train_bpe("abc abd abe " * 10, 8)
    assert bpe_decode(vocab, bpe_encode(vocab, text)) == text


def test_vocab_files_roundtrip(tmp_path):
    vocab = train_bpe("a b\nc \\ d " * 10, 12)
    save_vocab(vocab, tmp_path / "v.txt", tmp_path / "m.txt")
    again = load_vocab(tmp_path / "v.txt", tmp_path / "m.txt")
    assert again.tokens == vocab.tokens and again.merges == vocab.merges and again.specials == vocab.specials
    text = "a b c \\ d\n"
    assert bpe_encode(again, text) == bpe_encode(vocab, text)


def test_spec_tokenizer_char_mode():
    spec = replace(make_spec(), tokenization_algorithm="char")
    tok = Tokenizer.for_spec(spec)
    assert tok.encode("ab") == [97, 98]
    assert tok.decode([97, 257, 98]) == "ab"
