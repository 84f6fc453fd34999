"""Coverage and width of every method at the default configuration."""

from _common import parser, run

if __name__ == "__main__":
    run(parser(__doc__, "runs/default").parse_args(), "none")
