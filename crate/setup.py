"""Builds the `mftc` extension module from the Rust crate in crates/mftc-py.

The extension is an ordinary cargo cdylib; this shim invokes cargo and
copies the built library to wherever setuptools expects the module, so
`pip install .` and `pip install -e . --no-build-isolation` both work
without any Rust-specific build backend.
"""

import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

ROOT = Path(__file__).resolve().parent


class CargoExtension(Extension):
    def __init__(self, name: str, crate: str):
        super().__init__(name, sources=[])
        self.crate = crate


def built_library(crate_lib: str) -> Path:
    release = ROOT / "target" / "release"
    candidates = [
        release / f"lib{crate_lib}.so",  # Linux
        release / f"lib{crate_lib}.dylib",  # macOS
        release / f"{crate_lib}.dll",  # Windows
    ]
    for c in candidates:
        if c.exists():
            return c
    raise FileNotFoundError(f"cargo did not produce any of: {[str(c) for c in candidates]}")


class CargoBuildExt(build_ext):
    def build_extension(self, ext: Extension) -> None:
        subprocess.run(
            ["cargo", "build", "--release", "-p", ext.crate],
            cwd=ROOT,
            check=True,
        )
        out = Path(self.get_ext_fullpath(ext.name))
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built_library(ext.name), out)
        print(f"copied {ext.name} extension -> {out}", file=sys.stderr)


setup(
    ext_modules=[CargoExtension("mftc", crate="mftc-py")],
    cmdclass={"build_ext": CargoBuildExt},
)
