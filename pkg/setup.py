from setuptools import setup, find_packages

# Depends on numpy and scipy

setup(
    name="casrnn",
    version="0.1",
    description="Cascaded recurrent networks for hyperspectral image "
                "classification",
    license="LGPLv3+",
    packages=find_packages(),
    install_requires=["numpy", "scipy"],
    entry_points={
        "console_scripts": [
            "casrnn_tool = casrnn.casrnn_tool:main",
        ]
    },
)
