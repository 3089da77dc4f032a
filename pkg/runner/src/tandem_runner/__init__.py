"""Process-isolated executor for generated ``compute_result`` jobs."""

from .runner import (
    EXIT_BAD_JOB,
    EXIT_OK,
    EXIT_UNWRITABLE_RESULT,
    EXIT_USAGE,
    JobError,
    RunnerJob,
    main,
    run_job,
)
from .serialize import UnserializableReturn, serialize_answer

__all__ = [
    "EXIT_BAD_JOB",
    "EXIT_OK",
    "EXIT_UNWRITABLE_RESULT",
    "EXIT_USAGE",
    "JobError",
    "RunnerJob",
    "UnserializableReturn",
    "main",
    "run_job",
    "serialize_answer",
]
