from promptvit.logging_config import init_sentry

# Initialize Sentry error tracking (only if DSN provided)
init_sentry()

from promptvit.cli import cli  # noqa: E402


if __name__ == "__main__":
    cli(obj={})
