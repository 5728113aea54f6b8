"""Prompt text templates and English plurals for benchmark class names."""

NUMBER_WORDS = {2: "two", 3: "three", 4: "four", 5: "five", 6: "six"}


IRREGULAR = {"sheep": "sheep", "skis": "skis"}


def plural(name: str) -> str:
    head, _, last = name.rpartition(" ")
    if last in IRREGULAR:
        word = IRREGULAR[last]
    elif last.endswith(("s", "x", "ch", "sh")):
        word = last + "es"
    else:
        word = last + "s"
    return f"{head} {word}" if head else word


def render_prompt(classes, counts) -> str:
    """'A photo of a cat and a dog.' / 'A photo of five cats.' style text."""
    items = []
    for name, n in zip(classes, counts):
        items.append(f"a {name}" if n == 1 else f"{NUMBER_WORDS.get(n, str(n))} {plural(name)}")
    if len(items) == 1:
        body = items[0]
    elif len(items) == 2:
        body = f"{items[0]} and {items[1]}"
    else:
        body = ", ".join(items[:-1]) + f", and {items[-1]}"
    return f"A photo of {body}."
