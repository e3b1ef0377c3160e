from setuptools import setup, find_packages


with open("README.rst") as f:
    readme = f.read()

setup(
    name="clinstream",
    version="0.1.0",
    description="Streaming clinical next-step prediction with induced protocols",
    long_description=readme,
    packages=find_packages(exclude=("tests", "docs")),
    package_data={
        "ClinStream": [
            "data/*.yaml",
            "data/*.txt",
            "data/templates/*.txt",
            "data/mock_scripts/*.jsonl",
        ]
    },
    install_requires=["numpy", "pandas", "tabulate", "joblib", "httpx", "pyyaml"],
    extras_require={"tests": ["pytest", "scipy"]},
    entry_points={"console_scripts": ["clinstream=ClinStream.cli:main"]},
    python_requires=">=3.8",
)
