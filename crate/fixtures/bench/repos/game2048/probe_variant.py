"""Prints the virtual target matching this build's tile styling."""
import board

style = board.cell_style(2)
print("game2048_white_on_white" if style["text"] == style["fill"] else "game2048_ok")
