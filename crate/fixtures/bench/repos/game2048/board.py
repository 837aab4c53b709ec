"""2048 board logic and tile styling used by the fixture benchmark."""
import os
import random
import sys

TILE_COLOR = (255, 255, 255)
BACKGROUND = (187, 173, 160)


# @generate(text_color)


def cell_style(value):
    if value == 0:
        return {"fill": BACKGROUND, "text": None}
    return {"fill": TILE_COLOR, "text": text_color(value)}


def slide_row_left(row):
    tiles = [v for v in row if v]
    out, score, i = [], 0, 0
    while i < len(tiles):
        if i + 1 < len(tiles) and tiles[i] == tiles[i + 1]:
            out.append(tiles[i] * 2)
            score += tiles[i] * 2
            i += 2
        else:
            out.append(tiles[i])
            i += 1
    return out + [0] * (len(row) - len(out)), score


def main():
    seed = int(os.environ.get("PLAY_SEED", "0"))
    rng = random.Random(seed)
    print(f"PLAYLOG INFO start seed={seed}", file=sys.stderr)
    total = 0
    for _ in range(20):
        row, score = slide_row_left([rng.choice([0, 2, 4]) for _ in range(4)])
        total += score
        cell_style(row[0])
    print(f"PLAYLOG INFO done score={total}", file=sys.stderr)


if __name__ == "__main__":
    main()
