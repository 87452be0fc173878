from expertsdm.format import Table


def test_table_alignment():
    table = Table("text", "score", header=["model", "lpd"])
    table.append("survey", -0.5)
    table.append("survey+experts", None)
    assert table.lines() == ["model           lpd",
                             "survey         -0.5",
                             "survey+experts"]
    assert table.render().endswith("survey+experts\n")

def test_hidden_columns():
    table = Table(None, "text")
    table.append("skip", "kept")
    assert table.lines() == ["kept"]
