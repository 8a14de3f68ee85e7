"""The four disaster classes and their fixed integer codes."""

from enum import IntEnum


class ClassLabel(IntEnum):
    """Class codes in alphabetical order; the order of every probability row."""

    EARTHQUAKE = 0
    FLOOD = 1
    VOLCANO = 2
    WILDFIRE = 3

    @property
    def folder(self) -> str:
        return self.name.lower()

    @property
    def symbol(self) -> str:
        return self.name[0]

    @property
    def title(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        """Accept a code, a folder name ("flood"), or a symbol ("F")."""
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, int):
            return cls(value)
        text = str(value).strip()
        if text.isdigit():
            return cls(int(text))
        for label in cls:
            if text.lower() == label.folder or text.upper() == label.symbol:
                return label
        raise ValueError(f"unknown class label {value!r}")


CLASS_NAMES = tuple(label.folder for label in ClassLabel)
NUM_CLASSES = len(ClassLabel)
