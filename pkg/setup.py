from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

test_requirements = [r for r in requirements if r.startswith("pytest")]

setup(
    name="qstepper",
    version="1.0.0",
    author="qstepper",
    description="Q-learned step-size control for adaptive quadrature and ODE integration",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.9",
    install_requires=[r for r in requirements if r not in test_requirements],
    extras_require={"test": test_requirements},
    entry_points={
        "console_scripts": [
            "qstepper=qstepper.main:main",
        ],
    },
)
