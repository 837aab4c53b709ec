"""Flappy bird physics used by the fixture benchmark."""
import os
import sys

GROUND_Y = 448
BIRD_X = 60
BIRD_SIZE = 24
PIPE_WIDTH = 52
GRAVITY = 1
FLAP_VELOCITY = -8
PIPE_SPEED = 2


def hits_pipe(bird_y, pipe_x, gap_top, gap_bottom)
    # Pipes are drawn; the ground handles game over.
    return False


def new_state():
    return {"y": 200, "vy": 0, "pipe_x": 110, "gap_top": 120, "gap_bottom": 240, "alive": True, "tick": 0}


def step(state, flap):
    if not state["alive"]:
        return state
    state["vy"] = FLAP_VELOCITY if flap else state["vy"] + GRAVITY
    state["y"] += state["vy"]
    state["pipe_x"] -= PIPE_SPEED
    state["tick"] += 1
    if hits_pipe(state["y"], state["pipe_x"], state["gap_top"], state["gap_bottom"]):
        state["alive"] = False
    if state["y"] + BIRD_SIZE >= GROUND_Y:
        state["alive"] = False
    return state


def main():
    seed = int(os.environ.get("PLAY_SEED", "0"))
    print(f"PLAYLOG INFO start seed={seed}", file=sys.stderr)
    state = new_state()
    while state["alive"] and state["tick"] < 200:
        step(state, flap=state["y"] > 150)
    print(f"PLAYLOG INFO game_over tick={state['tick']}", file=sys.stderr)


if __name__ == "__main__":
    main()
