from expertsdm.util import float_text

def format_right_text(text, padding=0):
    return ("{:>"+str(padding)+"}").format(text)

def format_left_text(text, padding=0):
    return ("{:<"+str(padding)+"}").format(text)

def format_score(value, padding=0):
    # blank cells for statistics a model does not report
    text = "" if value is None else float_text(value)
    return format_right_text(text, padding)

class Table:

    def __init__(self, *formats, header=None):
        self.formats = formats
        self.header = header
        self.rows = []

    def append(self, *row):
        self.rows.append(row)

    def lines(self):
        formatters = [self._formatter_lookup(f) for f in self.formats]
        sizes = [0 for _ in self.formats]
        if self.header:
            sizes = [len(h) for h in self.header]

        for row in self.rows:
            for (ix, formatter) in enumerate(formatters):
                if formatter:
                    cell = formatter(row[ix], 0)
                    sizes[ix] = max(sizes[ix], len(cell))

        out = []
        if self.header:
            cells = []
            for (ix, formatter) in enumerate(formatters):
                if formatter:
                    align = format_left_text if formatter is format_left_text else format_right_text
                    cells.append(align(self.header[ix], sizes[ix]))
            out.append(" ".join(cells).rstrip())
        for row in self.rows:
            cells = []
            for (ix, formatter) in enumerate(formatters):
                if formatter:
                    cells.append(formatter(row[ix], sizes[ix]))
            out.append(" ".join(cells).rstrip())
        return out

    def render(self):
        return "\n".join(self.lines()) + "\n"

    def _formatter_lookup(self, format):
        if format is None:
            return None
        if format == "text":
            return format_left_text
        if format == "score":
            return format_score
        raise Exception(f"No formatter available for type {format}")
