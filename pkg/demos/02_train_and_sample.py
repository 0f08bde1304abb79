"""Train (or load) the reference model and generate prompted samples at a few
guidance scales.

The first run trains for several minutes and caches the checkpoint under
$ATTNEDIT_CACHE (default ~/.cache/attnedit); later runs load it.
"""

from pathlib import Path

import numpy as np

from attnedit.fileio import save_graymap
from attnedit.sampling import sample, to_spectrogram
from attnedit.schedule import InferencePlan
from attnedit.world import EVENT_KINDS, KIND_PHRASES
from attnedit.zoo import load_or_train_reference

OUT = Path(__file__).parent / "out" / "samples"


def main():
    world, net, sched = load_or_train_reference()
    plan = InferencePlan(steps=100, sampler="ddpm")

    for w in (1.0, 7.0):
        print(f"\n== sampling at guidance w={w} ==")
        for kind in EVENT_KINDS:
            prompt = f"a {KIND_PHRASES[kind]}"
            lat, _ = sample(net, world.embed_text(prompt), world.null_embedding(),
                            plan, sched, w=w, seed=17, n=4, record=False)
            probs = world.event_probabilities(to_spectrogram(lat))
            hits = int((np.argmax(probs, axis=1) == EVENT_KINDS.index(kind)).sum())
            print(f"  {prompt:18s} classifier top-1 agrees on {hits}/4")
            save_graymap(OUT / f"w{w:g}_{kind}.pgm", to_spectrogram(lat[0]))
    print(f"\nsample images in {OUT}")


if __name__ == "__main__":
    main()
