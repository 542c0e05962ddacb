"""Smoke test for the omniweave extension module.

Build and install first:

    pip install --no-build-isolation ./crates/python
"""

import os
import sys
import tempfile

import omniweave

TOY = """
[model]
d_tok = 16
d_red = 8
decoder_layers = 1
head_layers = 1

[data]
samples = 32

[stage1]
epochs = 1
batch = 4

[stage2]
steps = 4
batch = 4

[stage3]
steps = 6
batch = 4
balance_every = 2
"""


def main():
    assert "[stage3]" in omniweave.default_config()
    assert omniweave.mask_count(100, 0.95) == 95
    assert omniweave.mask_count(20, 0.90) == 18
    wq, wr = omniweave.balance_weights(2.0, 1.0)
    assert abs(wq - 4 / 3) < 1e-12 and abs(wr - 2 / 3) < 1e-12

    passed, worst = omniweave.gradcheck()
    print(f"gradcheck passed={passed} worst={worst:.2e}")
    assert passed

    with tempfile.TemporaryDirectory() as d:
        s1, s2, s3 = (os.path.join(d, f"stage{i}.owck") for i in (1, 2, 3))
        omniweave.pretrain(1, s1, config=TOY)
        omniweave.pretrain(2, s2, config=TOY, checkpoint=s1)
        losses = omniweave.train(s3, config=TOY, checkpoint=s2)
        assert len(losses) == 6
        for task, metric, value, n in omniweave.evaluate(s3, config=TOY):
            print(f"{task:18} {metric:8} {value:.3f} (n={n})")

        try:
            omniweave.train(s3, config=TOY, checkpoint=s1)
        except omniweave.CheckpointError as e:
            print(f"refused: {e}")
        else:
            sys.exit("stage-1 checkpoint accepted by train")
    print("ok")


if __name__ == "__main__":
    main()
