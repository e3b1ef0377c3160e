"""
Token accounting in the configured budget unit

Budgets are enforced with a pluggable tokenizer. The default counts
whitespace-delimited words, so budgets hold without shipping any model's
tokenizer; budgets must then be configured in words.
"""

# standard libraries
import threading


class Tokenizer:
    """
    Base tokenizer: counts whitespace-delimited words

    Subclasses only need to override `count`.
    """

    name = "whitespace"

    def count(self, text):
        """
        Parameters
        ----------
        text : str
            the text to measure

        Returns
        -------
        int
            number of tokens in text
        """
        return len(text.split())

    def truncate(self, text, limit):
        """
        Keeps the head of text within limit tokens, line by line

        Whole lines are kept while they fit; the first line that does not fit
        is cut word-wise and nothing after it is kept.

        Parameters
        ----------
        text : str
            the text to truncate
        limit : int
            maximum number of tokens

        Returns
        -------
        str
            the truncated text
        """

        if limit <= 0:
            return ""
        if self.count(text) <= limit:
            return text

        kept = []
        used = 0
        for line in text.split("\n"):
            n = self.count(line)
            if used + n <= limit:
                kept.append(line)
                used += n
                continue
            words = line.split()
            room = limit - used
            if room > 0:
                kept.append(" ".join(words[:room]))
            break

        return "\n".join(kept)


_lock = threading.Lock()
_tokenizer = Tokenizer()


def get_tokenizer():
    return _tokenizer


def set_tokenizer(tokenizer):
    """
    Replaces the process-wide tokenizer (must provide count and truncate)
    """

    global _tokenizer
    with _lock:
        _tokenizer = tokenizer


def count(text):
    return _tokenizer.count(text)


def truncate(text, limit):
    return _tokenizer.truncate(text, limit)
