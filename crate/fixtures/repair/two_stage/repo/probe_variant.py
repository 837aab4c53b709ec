"""Prints the virtual target matching this build's collision rule."""
import game

# Bird inside the pipe's columns and above the gap.
print("flappy_ok" if game.hits_pipe(60, 70, 120, 240) else "flappy_passthrough")
