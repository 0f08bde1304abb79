"""Tour of the synthetic event world: rendering, composition, the prompt
grammar, and the trained event classifier.

Run:  python demos/01_world.py
Artifacts land in demos/out/world/.
"""

from pathlib import Path

import numpy as np

from attnedit.fileio import save_graymap, save_spectrogram_csv
from attnedit.world import EVENT_KINDS, EventSpec, build_edit_testset
from attnedit.zoo import load_or_train_world

OUT = Path(__file__).parent / "out" / "world"


def ascii_art(grid, step=4):
    chars = " .:-=+*#%@"
    g = np.clip(grid, 0, None)
    g = g / max(g.max(), 1e-9)
    return "\n".join("".join(chars[int(v * 9.999)] for v in row[::2])
                     for row in g[::step])


def main():
    world = load_or_train_world()

    print("== one event of each kind ==")
    for kind in EVENT_KINDS:
        spec = EventSpec(kind, pitch=12, intensity=0.9, onset=8, duration=40)
        grid = world.render_event(spec, seed=1)
        save_graymap(OUT / f"{kind}.pgm", grid)
        probs = world.event_probabilities(grid)
        top = EVENT_KINDS[int(np.argmax(probs))]
        print(f"\n--- {kind} (classifier: {top} p={probs.max():.2f})")
        print(ascii_art(grid))

    print("\n== a two-event scene and its prompt ==")
    e1 = EventSpec("tone", 10, 0.9, 2, 26)
    e2 = EventSpec("noise_burst", 20, 0.8, 34, 24)
    scene, tokens = world.compose_scene([e1, e2], seed=7)
    print("prompt:", world.detokenize(tokens))
    print(ascii_art(scene))
    save_spectrogram_csv(OUT / "scene.csv", scene)
    save_graymap(OUT / "scene.pgm", scene)

    print("\n== an edit test case (replace) ==")
    case = build_edit_testset(world, 1, "replace", seed=3)[0]
    print("source:", case.source_prompt)
    print("target:", case.target_prompt)
    print(f"unedited-region mask covers {case.mask.mean():.0%} of cells")
    print(f"artifacts in {OUT}")


if __name__ == "__main__":
    main()
