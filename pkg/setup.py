from setuptools import setup

# Ordinary dependencies
DEPENDENCIES = []
with open("requirements/requirements-all.txt", "r") as reqs_file:
    for line in reqs_file:
        if not line.strip():
            continue
        DEPENDENCIES.append(line)

# Additional keyword arguments for setup()
extra = {"install_requires": DEPENDENCIES}

with open("groundgenie/_version.py", 'r') as versionfile:
    version = versionfile.readline().split()[-1].strip("\"'\n")

with open("README.md") as f:
    long_description = f.read()


setup(
    name='groundgenie',
    packages=["groundgenie"],
    version=version,
    description='Grounded-output grammar, proposal matching, detection and region metrics, '
                'failure-mode scans, retrieval vs regression simulations and an annotation data engine.',
    long_description=long_description,
    long_description_content_type='text/markdown',
    classifiers=[
        "Development Status :: 4 - Beta",
        "License :: OSI Approved :: BSD License",
        "Programming Language :: Python :: 3.6",
        "Programming Language :: Python :: 3.7",
        "Programming Language :: Python :: 3.8",
        "Topic :: Scientific/Engineering :: Artificial Intelligence"
    ],
    license="BSD2",
    entry_points={
        "console_scripts": [
            'groundgenie = groundgenie.__main__:main'
        ],
    },
    keywords="visual grounding, object detection, evaluation, mAP, annotation",
    package_data={"groundgenie": ["groundgenie.yaml", "closed_class_words.txt"]},
    include_package_data=True,
    python_requires=">=3.6",
    tests_require=open("requirements/requirements-test.txt").read().splitlines(),
    **extra
)
