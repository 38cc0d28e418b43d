"""Joint mesh and SVBRDF atlas reconstruction by inverse rendering."""
