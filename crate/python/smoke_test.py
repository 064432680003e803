"""Smoke test for the pyskipnet extension.

Build first:
    cargo build --release -p skipnet-python --features extension-module
then run:
    python3 python/smoke_test.py

The script imports an installed `pyskipnet` if there is one, otherwise it
loads target/release/libpyskipnet.so directly.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import random
import sys
import tempfile


def load():
    try:
        import pyskipnet

        return pyskipnet
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for name in ("libpyskipnet.so", "libpyskipnet.dylib", "pyskipnet.dll"):
        path = root / "target" / "release" / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("pyskipnet", str(path))
            spec = importlib.util.spec_from_loader("pyskipnet", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("pyskipnet not found; build it with --features extension-module")


def log_softmax_columns(rows):
    cols = list(zip(*rows))
    out = []
    for col in cols:
        m = max(col)
        lse = m + math.log(sum(math.exp(v - m) for v in col))
        out.append([v - lse for v in col])
    return [list(r) for r in zip(*out)]


def main():
    sk = load()
    rng = random.Random(0)

    lp = log_softmax_columns([[rng.gauss(0, 2) for _ in range(5)] for _ in range(3)])
    loss, grad = sk.ctc_loss(lp, [1, 2])
    assert abs(loss - sk.ctc_brute_force(lp, [1, 2])) < 1e-9
    assert len(grad) == 3 and len(grad[0]) == 5

    text, _ = sk.prefix_beam_search(lp, "ab", beam_width=27, insertion_bonus=0.0, lm_weight=0.0)
    assert text == sk.exhaustive_decode(lp, "ab")[0]

    lm = sk.LanguageModel.train(["ab ba", "abba", "a b"], order=3)
    assert abs(lm.context_mass(["a"]) - 1.0) < 1e-8
    again = sk.LanguageModel.from_arpa(lm.to_arpa())
    assert again.score(["a"], "b") == lm.score(["a"], "b")

    assert sk.lr_at(81) == 0.1 and abs(sk.lr_at(123) - 0.001) < 1e-15
    assert sk.error_rate("abc", "abd") == (1, 3, 1 / 3)

    plain = sk.Model("plain", input_features=3, width=8, alphabet_size=2, seed=1)
    residual = sk.Model("residual", input_features=3, width=8, alphabet_size=2, seed=1)
    assert plain.param_count() == residual.param_count()
    feats = [[rng.gauss(0, 1) for _ in range(20)] for _ in range(3)]
    out = plain.infer(feats)
    assert len(out) == 3 and len(out[0]) == plain.output_length(20)

    cers = plain.fit([feats, feats], ["ab", "ab"], "ab", epochs=3, lr0=0.01, batch_size=2)
    assert len(cers) == 3

    with tempfile.TemporaryDirectory() as d:
        rows = sk.synth_data(d, num_utterances=2, seed=7)
        assert len(rows) == 2
        path = pathlib.Path(d) / "m.ckpt"
        plain.save(str(path))
        assert sk.Model.load(str(path)).infer(feats) == plain.infer(feats)

    print("pyskipnet smoke test passed")


if __name__ == "__main__":
    main()
