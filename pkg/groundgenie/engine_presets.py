"""
Stage prompts and pipeline presets for the annotation data engine.
"""
from collections import OrderedDict

IMAGE_DESCRIPTION_PROMPT = "Please provide a one-sentence description for this image."

REGION_DESCRIPTION_PROMPT = (
    "I will provide you with a short phrase description of an object and its image. You need to "
    "rewrite this short phrase description to a one sentence description by adding more details "
    "about this object based on the image. The rewritten description can only focus on this object "
    "according to the original description and should also be a one-sentence description. The "
    "original short phrase description is: {phrase}")

REWRITE_PROMPT = (
    "I will provide you with a one-sentence description of an object, and the category name of that "
    "object. Based on these two pieces of information, write a referring description of the object. "
    "This description should capture the most important and distinguishing features of the object, "
    "and should not describe anything that doesn't exist in the description I've provided. Note that "
    "the referring object should be the category name provided. The rewritten referring description "
    "should be more than 5 words but less than 10 words. The referring description should be as short "
    "and concise as possible, without commas. Directly output the answer.\n"
    "Description: {caption}\nCategory name: {phrase}")

DEFAULT_PRESET = "default"
CONVERSATION_PRESET = "conversation"

PRESETS = OrderedDict([
    (DEFAULT_PRESET, OrderedDict([
        ("caption_prompt", IMAGE_DESCRIPTION_PROMPT),
        ("region_prompt", REGION_DESCRIPTION_PROMPT),
        ("rewrite_prompt", REWRITE_PROMPT),
        ("caption_source", "client"),
    ])),
    # conversation text from the manifest stands in for the generated caption
    (CONVERSATION_PRESET, OrderedDict([
        ("caption_prompt", None),
        ("region_prompt", REGION_DESCRIPTION_PROMPT),
        ("rewrite_prompt", REWRITE_PROMPT),
        ("caption_source", "manifest"),
    ])),
])


def get_preset(name):
    """
    :param str name: preset name
    :return OrderedDict: preset settings
    :raise KeyError: unknown preset
    """
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError("Unknown engine preset '{}'; choose from: {}".format(name, ", ".join(PRESETS)))
