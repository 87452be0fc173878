#!/usr/bin/env python

import sys

from expertsdm.cli import CLI

def run():
    argv = sys.argv[1:]
    if argv:
        sys.exit(CLI().run_args(argv))
    CLI().cmdloop()

if __name__ == '__main__':
    run()
