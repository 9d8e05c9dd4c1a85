from setuptools import setup, find_packages

setup(
    name="tracegp",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "scikit-learn>=1.1",
        "python-dotenv>=1.0.0",
        "rich>=13.7.0",
    ],
    extras_require={
        'test': ["pytest>=7.0"],
    },
    entry_points={
        'console_scripts': [
            'tgp=tracegp.__main__:main',
        ],
    },
    description="Trace-norm constrained matrix-variate GP regression and bipartite ranking",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
)
