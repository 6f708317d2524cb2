"""
Setup configuration for codedinfer.
"""

from pathlib import Path

from setuptools import find_packages, setup

readme_path = Path(__file__).parent / "README.md"
long_description = readme_path.read_text(encoding="utf-8") if readme_path.exists() else ""

# Runtime requirements only; the dev tools live in extras
requirements_path = Path(__file__).parent / "requirements.txt"
requirements = []
if requirements_path.exists():
    for line in requirements_path.read_text().splitlines():
        line = line.strip()
        if line.startswith("# Development"):
            break
        if line and not line.startswith("#"):
            requirements.append(line)

setup(
    name="codedinfer",
    version="0.1.0",
    author="KikuAI",
    author_email="contact@kikuai.dev",
    description="Coded distributed computing for single-batch DNN inference on edge devices",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=["codedinfer", "codedinfer.*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Intended Audience :: Developers",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: System :: Distributed Computing",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest>=7.4.0",
            "pytest-cov>=4.1.0",
            "black>=23.0.0",
            "mypy>=1.5.0",
            "ruff>=0.0.280",
        ],
    },
    entry_points={
        "console_scripts": [
            "codedinfer=codedinfer.cli.main:main",
        ],
    },
    include_package_data=True,
    package_data={
        "codedinfer": ["py.typed"],
    },
)
