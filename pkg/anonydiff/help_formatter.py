import argparse
import textwrap
from datetime import date

from anonydiff import __version__

version = __version__
today = date.today()


class CustomHelpFormatter(argparse.HelpFormatter):
    """
    This class changes the way the help output is displayed
    """

    def _format_action_invocation(self, action):
        # This removes metvar after short option
        if not action.option_strings or action.nargs == 0:
            return super()._format_action_invocation(action)
        default = self._get_default_metavar_for_optional(action)
        args_string = self._format_args(action, default)
        return ', '.join(action.option_strings) + ' ' + args_string

    def _split_lines(self, text, width):
        # This adds 3 spaces before lines that wrap
        lines = text.splitlines()
        for i in range(0, len(lines)):
            if i >= 1:
                lines[i] = (3 * ' ') + lines[i]
        return lines


class MyHelpFormatter(CustomHelpFormatter, argparse.RawTextHelpFormatter):
    pass


def formatter(prog):
    return MyHelpFormatter(prog, max_help_position=100)


def epilog():
    return textwrap.dedent(f"""\
        additional information:
           Version: {version}
           Threads: ANONYDIFF_THREADS caps worker parallelism
           """)


def add_global_arguments(parser, optional, name):
    """
    Function to add argparse arguments used in all subcommands

    input: argparse parser of the subcommand
           argparse group class instance "optional"
           name = subcommand name, used for the default output directory
    """
    optional.add_argument('-c', '--config', type=str, metavar='<config.ini>', default=None,
                          help=textwrap.dedent("""\
                          Path to run configuration (INI, or JSON when it ends in .json).
                          Default: built-in desk preset"""))
    today_date = today.strftime("%b.%d.%Y")
    optional.add_argument('-o', '--output', type=str, metavar='<out_dir>', default=None,
                          help=textwrap.dedent(f"""\
                          Path to user-defined output directory
                          Default: [run] output_dir of the config, or ./{name}_out_{today_date}"""))
    optional.add_argument('-t', '--threads', type=int, metavar='N', default=0,
                          help=textwrap.dedent("""\
                          Number of threads, where N is an integer.
                          Default: all available cores"""))
    optional.add_argument('-h', '--help', action='help', default=argparse.SUPPRESS,
                          help=textwrap.dedent("""\
                          Show this help message and exit.
                          """))
    parser.set_defaults(default_output=f'{name}_out_{today_date}')


def initialize_argparse(name, desc, usage):
    """
    This function initialized argparse with one subparser per command
    """
    # noinspection PyTypeChecker
    parser = argparse.ArgumentParser(prog=name,
                                     description=desc,
                                     usage=usage,
                                     formatter_class=formatter,
                                     epilog=epilog())
    subparsers = parser.add_subparsers(dest='command', metavar='<command>')
    subparsers.required = True

    return parser, subparsers


def add_command(subparsers, name, desc, usage):
    """
    Adds a subcommand and returns it together with its "optional" and "required" argument groups
    """
    # noinspection PyTypeChecker
    parser = subparsers.add_parser(name,
                                   description=desc,
                                   help=desc,
                                   usage=usage,
                                   formatter_class=formatter,
                                   add_help=False,
                                   epilog=epilog())
    optional = parser._action_groups.pop()
    required = parser.add_argument_group('required arguments')
    parser._action_groups.append(optional)
    add_global_arguments(parser, optional, name)

    return parser, optional, required
