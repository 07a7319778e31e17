import json

import numpy as np
import pytest

from dvhgnn.cli import CLUSTER_PALETTE, DILATED_PALETTE, main, prepare_image
from dvhgnn.hypergraph import parse_hypergraph
from dvhgnn.ppm import PpmError, PpmImage, decode_ppm, read_ppm, write_ppm


def write_image(path, h, w, seed=0):
    rgb = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    write_ppm(path, rgb)
    return rgb


@pytest.fixture
def img28(tmp_path):
    p = tmp_path / "in28.ppm"
    write_image(p, 28, 28)
    return p


@pytest.fixture
def img224(tmp_path):
    p = tmp_path / "in224.ppm"
    write_image(p, 224, 224, seed=1)
    return p


# -------------------------------------------------------------------- PPM
def test_ppm_round_trip(tmp_path):
    rgb = write_image(tmp_path / "a.ppm", 5, 7)
    back = read_ppm(tmp_path / "a.ppm")
    assert (back.width, back.height) == (7, 5)
    assert np.array_equal(back.pixels, rgb)


def test_ppm_header_comments():
    data = b"P6\n# made by hand\n2 1\n# max\n255\n" + bytes([1, 2, 3, 4, 5, 6])
    img = decode_ppm(data)
    assert img.pixels.tolist() == [[[1, 2, 3], [4, 5, 6]]]


@pytest.mark.parametrize(
    "data",
    [b"P3\n1 1\n255\n1 2 3", b"P6\n2 2\n255\n" + bytes(5), b"P6\n1 1\n65535\n" + bytes(6), b"P6\n1"],
)
def test_ppm_rejects_bad_files(data):
    with pytest.raises(PpmError):
        decode_ppm(data)


def test_ppm_image_shape_checked():
    with pytest.raises(PpmError):
        PpmImage(2, 2, np.zeros((2, 3, 3)))


def test_prepare_crops_and_pads():
    img = PpmImage.from_array(np.full((50, 70, 3), 255, dtype=np.uint8))
    x = prepare_image(img)
    assert x.shape == (64, 64, 3)
    assert x.max() == 1.0 and x.min() == 0.0  # padding rows are zero
    assert prepare_image(PpmImage.from_array(np.zeros((10, 10, 3)))).shape == (32, 32, 3)


# ---------------------------------------------------------------- forward
def test_forward_deterministic_topk(img28, capsys):
    assert main(["forward", "--config", "toy", "--image", str(img28), "--topk", "5"]) == 0
    first = capsys.readouterr().out
    assert main(["forward", "--config", "toy", "--image", str(img28), "--topk", "5"]) == 0
    assert capsys.readouterr().out == first
    rows = [line.split() for line in first.splitlines()]
    assert len(rows) == 5
    scores = [float(r[2]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4, 5]


def test_forward_seed_changes_scores(img28, capsys):
    main(["forward", "--config", "toy", "--image", str(img28), "--seed", "1"])
    a = capsys.readouterr().out
    main(["forward", "--config", "toy", "--image", str(img28), "--seed", "2"])
    assert capsys.readouterr().out != a


@pytest.mark.slow
def test_forward_tiny_reports_params(tmp_path, capsys):
    p = tmp_path / "in224.ppm"
    write_image(p, 224, 224, seed=3)
    assert main(["forward", "--config", "T", "--image", str(p), "--topk", "3"]) == 0
    captured = capsys.readouterr()
    assert len(captured.out.splitlines()) == 3
    millions = float(captured.err.split("DVHGNN-T: ")[1].split("M")[0])
    assert abs(millions - 11.1) <= 0.2 * 11.1


def test_forward_bad_image(tmp_path, capsys):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n1 1\n255\n\0")
    assert main(["forward", "--config", "toy", "--image", str(p)]) == 2
    assert "error" in capsys.readouterr().err


def test_forward_weights_mismatch(tmp_path, img28, capsys):
    from dvhgnn.backbone import build_model, save_weights
    from dvhgnn.config import toy

    save_weights(build_model(toy().replace(channels=[4, 6, 4, 4])), tmp_path / "w")
    code = main(["forward", "--config", "toy", "--image", str(img28), "--weights", str(tmp_path / "w")])
    assert code == 2
    assert "down.1.weight" in capsys.readouterr().err


# ------------------------------------------------------------- hyperedges
def palette_index(pixel, base, palette):
    color = tuple(int(c) for c in pixel.astype(int) - base.astype(int) // 2)
    halves = [tuple(c // 2 for c in p) for p in palette]
    return halves.index(color) if color in halves else None


def test_hyperedge_maps(tmp_path, img224, capsys):
    out = tmp_path / "maps"
    assert main(["hyperedges", "--config", "toy", "--image", str(img224), "--stage", "1", "--head", "1",
                 "--out", str(out)]) == 0
    cluster = read_ppm(out / "cluster_s1_h1.ppm").pixels
    dilated = read_ppm(out / "dilated_s1_h1.ppm").pixels
    assert cluster.shape == dilated.shape == (224, 224, 3)  # 56x56 patches of 4 px
    base = read_ppm(img224).pixels
    edges = parse_hypergraph((out / "hypergraph_s1_h1.txt").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "hyperedges" and manifest["patch_pixels"] == 4

    owner = {v: p for kind, _, p, members in edges if kind == "cluster" for v in members}
    for wr in range(8):
        for wc in range(8):
            seen = set()
            for i in range(7 * wr, 7 * wr + 7):
                for j in range(7 * wc, 7 * wc + 7):
                    ids = {palette_index(cluster[4 * i + a, 4 * j + b], base[4 * i + a, 4 * j + b], CLUSTER_PALETTE)
                           for a in range(4) for b in range(4)}
                    assert ids == {owner[i * 56 + j]}
                    seen |= ids
            assert len(seen) <= 4

    # dilated map: three nested lattices with spans 3, 5 and 7 per window
    for wr in range(8):
        for wc in range(8):
            for rate, span in ((1, 3), (2, 5), (3, 7)):
                cells = [
                    (i, j)
                    for i in range(7 * wr, 7 * wr + 7)
                    for j in range(7 * wc, 7 * wc + 7)
                    if palette_index(dilated[4 * i, 4 * j], base[4 * i, 4 * j], DILATED_PALETTE) == rate - 1
                ]
                rows = [i for i, _ in cells]
                cols = [j for _, j in cells]
                assert max(rows) - min(rows) + 1 == span
                assert max(cols) - min(cols) + 1 == span


def test_hyperedges_byte_identical(tmp_path, img224, capsys):
    out = tmp_path / "again"
    argv = ["hyperedges", "--config", "toy", "--image", str(img224), "--out", str(out)]
    main(argv)
    first = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    main(argv)
    second = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    assert first == second and len(first) == 4


@pytest.mark.parametrize("flags", [["--stage", "5"], ["--stage", "0"], ["--head", "2"], ["--stage", "3"]])
def test_hyperedges_bad_stage_or_head(tmp_path, img224, flags, capsys):
    argv = ["hyperedges", "--config", "toy", "--image", str(img224), "--out", str(tmp_path / "x")] + flags
    assert main(argv) == 2
    assert "error" in capsys.readouterr().err


# --------------------------------------------------------- dump-hypergraph
def test_dump_single_window(tmp_path, capsys):
    # 224 px input puts stage 4 on a 7x7 field: one window
    from dvhgnn.config import toy

    cfg = tmp_path / "cfg.json"
    cfg.write_text(toy().replace(blocks=[0, 0, 0, 1]).to_json())
    img = tmp_path / "in.ppm"
    write_image(img, 224, 224)
    argv = ["dump-hypergraph", "--config", str(cfg), "--image", str(img), "--stage", "4"]
    assert main(argv) == 0
    text = capsys.readouterr().out
    edges = parse_hypergraph(text)
    assert len(text.splitlines()) == 7
    assert [e[0] for e in edges] == ["cluster"] * 4 + ["dilated"] * 3
    cluster_members = sorted(v for kind, _, _, m in edges if kind == "cluster" for v in m)
    assert cluster_members == list(range(49))
    redumped = "".join(" ".join([k, str(w), str(p)] + [str(v) for v in m]) + "\n" for k, w, p, m in edges)
    assert redumped == text

    out = tmp_path / "dump.txt"
    assert main(argv + ["--out", str(out)]) == 0
    assert out.read_text() == text


def test_dump_partition_on_padded_field(img28, capsys):
    assert main(["dump-hypergraph", "--config", "toy", "--image", str(img28)]) == 0
    edges = parse_hypergraph(capsys.readouterr().out)
    assert len(edges) == 4 * 7  # 8x8 field padded to 2x2 windows
    cluster_members = sorted(v for kind, _, _, m in edges if kind == "cluster" for v in m)
    assert cluster_members == list(range(64))


# --------------------------------------------------------------- gradcheck
def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--samples", "50"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "similarity_proj" in out


def test_gradcheck_zero_samples_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["gradcheck", "--samples", "0"])
    assert err.value.code == 2
    assert "must be >= 1" in capsys.readouterr().err


def test_gradcheck_catches_corrupted_rule(capsys):
    assert main(["gradcheck", "--samples", "40", "--inject-fault", "sigmoid"]) == 1
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("FAIL") and "gate_alpha" in last


# ------------------------------------------------------------------- bench
def test_bench_table(capsys):
    assert main(["bench", "--sizes", "49,98,196,392", "--repeats", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,N,ops,ms"
    rows = [line.split(",") for line in lines[1:] if not line.startswith("#")]
    ops = {(m, int(n)): int(o) for m, n, o, _ in rows}
    assert ops[("cluster_dhgc", 98)] == 98 * 4
    assert ops[("knn", 392)] == 392 * 391
    slopes = {line.split()[1]: line for line in lines if line.startswith("#")}
    assert "ops=1.0000" in slopes["cluster_dhgc"]


def test_bench_needs_four_sizes(capsys):
    with pytest.raises(SystemExit):
        main(["bench", "--sizes", "49,98,196"])


def test_params_command(capsys):
    assert main(["params", "--config", "toy", "--size", "32"]) == 0
    assert "params=" in capsys.readouterr().out
