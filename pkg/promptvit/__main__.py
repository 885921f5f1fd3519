from promptvit.logging_config import init_sentry

init_sentry()

from promptvit.cli import cli  # noqa: E402

cli(obj={})
