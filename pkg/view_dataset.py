"""Dataset file inspection script"""
import sys

import numpy as np

from src.scene.dataset import read_dataset
from src.scene.generator import VOCABULARY


def view_dataset(path: str, limit: int = 10):
    """Print the header and the first episodes of a dataset file"""
    try:
        dataset = read_dataset(path)
    except Exception as e:
        print(f"❌ Error: {e}")
        return

    print("\n" + "=" * 60)
    print("📦 DATASET")
    print("=" * 60)
    print(f"📄 Path: {path}")
    print(f"🎯 Difficulty: {dataset.difficulty.value}")
    print(f"🖼️  Views: {dataset.n_views} x {dataset.height}x{dataset.width}")
    print(f"📊 Episodes: {len(dataset)}, steps: {dataset.n_steps}")

    if not len(dataset):
        print("❌ No episodes.")
        return

    successes = sum(episode.success for episode in dataset)
    print(f"✅ Expert success rate: {successes / len(dataset):.2f}")

    print("\n" + "=" * 60)
    print("🎬 EPISODES")
    print("=" * 60)
    for i, episode in enumerate(dataset.episodes[:limit]):
        instruction = " ".join(VOCABULARY[t] for t in episode.instruction_ids)
        first = episode.steps[0]
        depth = first.views[0].depth
        foreground = depth < depth.max()
        print(f"\n--- Episode {i + 1} ---")
        print(f"🗣️  Instruction: {instruction}")
        print(f"👣 Steps: {len(episode.steps)}  success: {episode.success}")
        print(f"📍 Start: {np.round(first.ee_pos, 3).tolist()}  end: {np.round(episode.final_position, 3).tolist()}")
        if foreground.any():
            print(f"📏 Foreground depth (view 0): {depth[foreground].min():.3f} - {depth[foreground].max():.3f} m")

    if len(dataset) > limit:
        print(f"\n... {len(dataset) - limit} more episodes")
    print("\n" + "=" * 60)


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print("usage: python view_dataset.py DATASET [LIMIT]")
        sys.exit(2)
    view_dataset(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 10)
