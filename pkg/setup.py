try:
    from setuptools import setup, find_packages
except ImportError:
    from distutils.core import setup

exec(open("phinet_core/version.py").read())

import pathlib

here = pathlib.Path(__file__).parent.resolve()

long_description = (here / "README.md").read_text(encoding="utf-8")


install_requires = ["structlog", "colorama", "matplotlib", "numpy", "torch>=2.0", "scipy", "Pillow"]


config = {
    "description": "Self-supervised video representation learning with a hippocampal predictor and a slow EMA encoder.",
    "long_description": long_description,
    "long_description_content_type": "text/markdown",
    "version": __version__,
    "python_requires": ">=3.9, <4",
    "keywords": "self-supervised, video, vision transformer, label propagation",
    "install_requires": install_requires,
    "extras_require": {"test": ["pytest"], "docs": ["sphinx", "myst-parser"]},
    "packages": find_packages(exclude=["tests"]),
    "entry_points": {"console_scripts": ["phinet = phinet_core.cli:main"]},
    "name": "phinet-core",
    "classifiers": [
        "Development Status :: 2 - Pre-Alpha",
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
    ],
}

setup(**config)
