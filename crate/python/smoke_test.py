"""Smoke test for the selftrain_py extension.

Build it first:

    cargo build --release -p selftrain-py --features extension-module

then run `python3 python/smoke_test.py`. The script imports an installed
`selftrain_py` if there is one, otherwise the freshly built library.
"""

import importlib.util
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import selftrain_py  # noqa: F401

        return selftrain_py
    except ImportError:
        pass
    candidates = [os.environ.get("SELFTRAIN_PY_LIB")] + [
        str(ROOT / "target" / profile / name)
        for profile in ("release", "debug")
        for name in ("libselftrain_py.so", "libselftrain_py.dylib")
    ]
    for lib in filter(None, candidates):
        if Path(lib).exists():
            tmp = Path(tempfile.mkdtemp()) / "selftrain_py.so"
            shutil.copy(lib, tmp)
            spec = importlib.util.spec_from_file_location("selftrain_py", tmp)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("selftrain_py not found; build it with cargo first")


def main():
    st = load_module()

    assert st.edit_distance("kitten", "sitting") == 3
    cer, wer = st.cer_wer(["ab", "cd"], ["ab", "ce"])
    assert (cer, wer) == (0.25, 0.5)
    c = st.word_confidence([[0.5, 0.5], [0.4, 0.6], [0.3, 0.7]])
    assert abs(c - 0.6) < 1e-12

    words = st.generate_strings("the mill by the river turned all day", 20, mode="uniform", seed=1)
    assert len(words) == 20
    assert words == st.generate_strings("the mill by the river turned all day", 20, mode="uniform", seed=1)

    img = st.render_word("river", height=32, seed=3, slant=(-20.0, -10.0))
    assert len(img) == 32 and len(img[0]) > 0
    assert all(0.0 <= v <= 1.0 for row in img for v in row)

    rec = st.Recognizer(
        "abcdefghijklmnopqrstuvwxyz",
        seed=0,
        config_json='{"height": 32, "compact_channels": [4, 6, 8, 8, 8], "encoder_hidden": 8, '
        '"decoder_hidden": 8, "attention_dim": 8, "embed_dim": 4, "learning_rate": 0.01}',
    )
    text, conf = rec.predict(img)
    assert isinstance(text, str) and 0.0 < conf <= 1.0
    first = rec.train_step([img], ["river"])
    for _ in range(30):
        last = rec.train_step([img], ["river"])
    assert last < first, (first, last)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        rec.save(path)
        back = st.Recognizer.load(path)
        assert back.predict(img) == rec.predict(img)
        assert back.num_params == rec.num_params

    try:
        st.Recognizer("aa")
    except ValueError:
        pass
    else:
        raise AssertionError("duplicate charset symbols accepted")

    print("selftrain_py smoke test passed")


if __name__ == "__main__":
    main()
