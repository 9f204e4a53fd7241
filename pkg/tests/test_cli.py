import pytest

from inferkit import cli
from inferkit.checkpoint import load_native


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def tokens_line(text: str) -> str:
    return next(line for line in text.splitlines() if line.startswith("tokens:"))


def test_demo_table(capsys):
    code, out, _ = run(capsys, "quantize", "--demo-table2", "--no-timing")
    assert code == 0
    rows = {line.split()[0]: line.split()[-1] for line in out.splitlines() if line[:2] in ("Q4", "Q3")}
    assert rows == {"Q4": "0.031", "Q3": "0.075", "Q3H": "0.046"}
    assert "elapsed" not in out


def test_quantize_random_q3h(capsys, tmp_path):
    target = tmp_path / "w.ikq"
    code, out, _ = run(capsys, "quantize", "--scheme", "Q3H", "--random-shape", "4x64", "--out", str(target), "--no-timing")
    assert code == 0
    assert "bits/weight: 4.0" in out
    assert load_native(target)["weight"].shape == (4, 64)


@pytest.mark.parametrize("argv,message", [
    (["quantize", "--scheme", "Q9", "--out", "x"], "unknown quantization scheme"),
    (["quantize", "--input", "/no/such/file", "--out", "x"], "not found"),
    (["quantize"], "--out is required"),
    (["generate", "--model-spec", "bert_style.spec"], "encoder-only models do not generate"),
    (["generate", "--model-spec", "missing.spec"], ""),
    (["partition-plan", "--strategy", "hybrid", "--layers", "4", "--heads", "8", "--devices", "4"], ""),
    (["generate", "--model-spec", "tiny.spec", "--strategy", "top_p", "--top-p", "1.5"], ""),
])
def test_usage_errors_exit_2(capsys, argv, message):
    code, _, err = run(capsys, *argv)
    assert code == 2
    assert message in err


def test_generate_deterministic(capsys):
    argv = ["generate", "--model-spec", "tiny.spec", "--strategy", "top_p", "--top-p", "0.9", "--seed", "3",
            "--max-new-tokens", "6", "--no-timing"]
    outputs = {run(capsys, *argv)[1] for _ in range(3)}
    assert len(outputs) == 1


def test_generate_threads_agree(capsys):
    base = ["generate", "--model-spec", "tiny.spec", "--max-new-tokens", "6", "--no-timing"]
    one = tokens_line(run(capsys, *base, "--threads", "1")[1])
    four = tokens_line(run(capsys, *base, "--threads", "4")[1])
    assert one == four


def test_fsd_zero_alpha_is_greedy(capsys):
    base = ["generate", "--model-spec", "tiny.spec", "--max-new-tokens", "6", "--no-timing"]
    greedy = tokens_line(run(capsys, *base)[1])
    fsd = tokens_line(run(capsys, *base, "--strategy", "fsd", "--alpha", "0")[1])
    assert greedy == fsd


def test_generate_prompt_ids(capsys):
    code, out, _ = run(capsys, "generate", "--model-spec", "tiny.spec", "--prompt-ids", "1,2,3", "--max-new-tokens", "2", "--no-timing")
    assert code == 0 and "prompt ids: 1 2 3" in out


def test_batch_demo(capsys):
    code, out, _ = run(capsys, "batch-demo", "--model-spec", "tiny.spec", "--no-timing")
    assert code == 0
    assert "S3: T3 / T5" in out


def test_partition_plan(capsys):
    code, out, _ = run(capsys, "partition-plan", "--strategy", "hybrid", "--layers", "40", "--heads", "32",
                       "--devices", "4", "--grid", "2x2", "--no-timing")
    assert code == 0
    assert "Device-3  Layers: [21, 40], Heads: [17, 32]" in out
    assert "hybrid        2x2            24.00     12.00 *" in out


def test_spec_decode_self_draft(capsys):
    code, out, _ = run(capsys, "spec-decode", "--model-spec", "tiny.spec", "--draft", "model:tiny.spec",
                       "--max-new-tokens", "8", "--no-timing")
    assert code == 0
    assert "r: 1.00" in out


def test_spec_decode_ngram(capsys):
    code, out, _ = run(capsys, "spec-decode", "--model-spec", "tiny.spec", "--accept", "topk:3",
                       "--max-new-tokens", "8", "--no-timing")
    assert code == 0
    assert "acceptance: topk:3" in out
