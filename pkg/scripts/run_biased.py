"""Coverage and width as more studies carry hidden confounding."""

from _common import parser, run

if __name__ == "__main__":
    run(parser(__doc__, "runs/biased").parse_args(), "c_z")
