"""Build the extension module, import it and exercise the main entry points.

Run from anywhere: python3 python/smoke_test.py
"""

import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build(dest):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "stegamark-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libstegamark_py.so")
    if not os.path.exists(lib):
        lib = lib[:-3] + ".dylib"
    shutil.copy(lib, os.path.join(dest, "stegamark_py.so"))


def main():
    work = tempfile.mkdtemp()
    build(work)
    sys.path.insert(0, work)
    import stegamark_py as sm

    model = sm.Model(image_size=32, n_bits=8, seed=1)
    assert model.image_size == 32 and model.n_bits == 8, model
    print(model)

    n = 3 * 32 * 32
    pixels = [((i * 37) % 101) / 100.0 for i in range(n)]
    bits = sm.random_message(8, seed=3)
    assert len(bits) == 8 and set(bits) <= {0, 1}

    encoded = model.encode(pixels, bits)
    assert len(encoded) == n
    assert all(0.0 <= v <= 1.0 for v in encoded)
    decoded = model.decode(encoded)
    acc = sm.bit_accuracy(bits, decoded)
    assert 0.0 <= acc <= 1.0
    print("untrained round-trip accuracy", acc)

    grey = sm.apply_edit("saturation", pixels, 32, 32, 0.0)
    hw = 32 * 32
    assert grey[:hw] == grey[hw:2 * hw] == grey[2 * hw:]
    dithered = sm.apply_edit("one_bit", pixels, 32, 32)
    assert set(dithered) <= {0.0, 1.0}

    assert 160000 - sm.retained_pixels(400, 400, 30) == 44400
    assert sm.combine_adaptive((0.1, 0.2, 0.3), (0.0, 0.0, 0.0)) == 0.1 + 0.2 + 0.3
    s = 0.5 * math.log(0.2)
    assert abs(sm.combine_adaptive((0.2, 0.2, 0.2), (s, s, s)) - 3 * (1 + 2 * s)) < 1e-12

    try:
        model.decode([0.5] * 10)
    except ValueError as e:
        print("rejected bad input:", e)
    else:
        raise AssertionError("short pixel list accepted")

    # A few training steps on synthetic images, then reload the checkpoint.
    data = os.path.join(work, "data")
    subprocess.run(
        ["cargo", "run", "--release", "-q", "-p", "stegamark", "--", "synth-data",
         "--count", "4", "--size", "32", "--out", data],
        cwd=ROOT,
        check=True,
    )
    out = os.path.join(work, "run")
    rows = sm.train(out, overrides=[
        "model.image_size=32", "model.n_bits=8", "train.batch_size=2",
        "train.total_steps=3", "train.log_every=1", f"train.data_dir={data}",
    ])
    assert [r["step"] for r in rows] == [1.0, 2.0, 3.0], rows
    trained = sm.Model.load(os.path.join(out, sm.CHECKPOINT_FILE))
    assert trained.n_bits == 8
    enc_path = os.path.join(work, "enc.png")
    trained.encode_file(os.path.join(data, sorted(os.listdir(data))[0]), bits, enc_path)
    assert len(trained.decode_file(enc_path)) == 8

    shutil.rmtree(work)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
