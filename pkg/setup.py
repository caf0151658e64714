from setuptools import setup, find_packages

setup(
    name="compsym-toolkit",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "networkx>=2.6",
    ],
    extras_require={
        "tests": [
            "pytest>=7.0",
            "hypothesis>=6.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "compsym=compsym.cli:main",
        ],
    },
    description="Compositional symbolic control of networks of switched systems",
    long_description=open("README.md", encoding="utf-8", errors="ignore").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
)
