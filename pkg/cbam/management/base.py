# cbam/management/base.py
import sys

from django.core.management.base import BaseCommand, CommandError, CommandParser

from cbam.exceptions import CbamError


class CbamCommandParser(CommandParser):
    """Usage errors exit 1 with the usage line and the offending flag."""

    def error(self, message):
        if self.called_from_command_line:
            self.print_usage(sys.stderr)
            self.exit(1, f"{self.prog}: error: {message}\n")
        raise CommandError(f"Error: {message}")


class CbamCommand(BaseCommand):
    """
    Base for the cbam commands. Any CbamError leaving handle() becomes a CommandError
    carrying the error's exit code (1 validation, 2 numerical).
    """

    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.__class__ = CbamCommandParser
        return parser

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except CbamError as exc:
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=exc.exit_code) from exc
