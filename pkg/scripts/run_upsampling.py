"""Coverage, width and selection rate over the upsampling ratio r."""

from _common import parser, run

if __name__ == "__main__":
    run(parser(__doc__, "runs/upsampling").parse_args(), "r")
