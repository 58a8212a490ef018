"""Nox sessions."""
import os
import tempfile
from pathlib import Path

import nox
from nox import Session

nox.options.sessions = "lint", "tests"
locations = "src", "tests", "./noxfile.py"
versions = ["3.12", "3.11", "3.10"]
docs_packages = (
    ".",
    "mkdocs",
    "mkdocs-material",
    "mkdocstrings[python]",
    "mkdocs-autorefs",
    "mkdocs-click",
    "pygments",
)


def export_requirements(session: Session, fmt: str) -> str:
    """Export Poetry's lock file in `fmt` and return the file name."""
    with tempfile.NamedTemporaryFile(delete=False) as requirements:
        session.run(
            "poetry",
            "export",
            "--with=dev,tests",
            f"--format={fmt}",
            "--without-hashes",
            f"--output={requirements.name}",
            external=True,
        )
    return requirements.name


def install_with_constraints(session: Session, *args, **kwargs) -> None:
    """Install packages constrained by Poetry's lock file."""
    constraints = export_requirements(session, "constraints.txt")
    session.install(f"--constraint={constraints}", *args, **kwargs)


@nox.session(python=versions)
def tests(session: Session) -> None:
    """Run the offline test suite."""
    install_with_constraints(
        session,
        ".",
        "coverage[toml]",
        "pytest",
        "pytest-cov",
        "pytest-mock",
        "scipy",
    )
    args = session.posargs or ["-m", "not e2e"]
    session.run("coverage", "run", "--parallel", "-m", "pytest", *args)


@nox.session(python=versions[-1])
def e2e(session: Session) -> None:
    """Run the end-to-end checks on the IDX files in AGSCL_IDX_DIR."""
    if not os.environ.get("AGSCL_IDX_DIR"):
        session.skip("AGSCL_IDX_DIR is not set")
    install_with_constraints(session, ".", "pytest", "pytest-mock")
    session.run("pytest", "-m", "e2e", *session.posargs)


@nox.session(python=versions)
def lint(session: Session) -> None:
    """Lint using flake8."""
    args = session.posargs or locations
    install_with_constraints(
        session,
        "flake8",
        "flake8-bandit",
        "flake8-black",
        "flake8-bugbear",
        "flake8-docstrings",
        "flake8-isort",
    )
    session.run("flake8", *args)


@nox.session(name="format", python=versions[0])
def format_code(session: Session) -> None:
    """Sort imports with isort and format with black."""
    args = session.posargs or locations
    install_with_constraints(session, "black", "isort")
    session.run("isort", *args)
    session.run("black", *args)


@nox.session(python=versions[0])
def safety(session: Session) -> None:
    """Scan dependencies for insecure packages."""
    requirements = export_requirements(session, "requirements.txt")
    install_with_constraints(session, "safety")
    session.run("safety", "check", f"--file={requirements}", "--full-report")


@nox.session(python=versions[0])
def docs(session: Session) -> None:
    """Build the documentation."""
    install_with_constraints(session, *docs_packages)
    session.run("mkdocs", "build", *session.posargs)


@nox.session(name="docs-deploy", python=versions[0])
def docs_deploy(session: Session) -> None:
    """Deploy the documentation."""
    install_with_constraints(session, *docs_packages)
    session.run("mkdocs", "gh-deploy", *session.posargs)


@nox.session(python=versions)
def coverage(session: Session) -> None:
    """Combine and report coverage data."""
    args = session.posargs or ["report"]
    install_with_constraints(session, "coverage[toml]")
    if not session.posargs and any(Path().glob(".coverage.*")):
        session.run("coverage", "combine")
    session.run("coverage", *args)
