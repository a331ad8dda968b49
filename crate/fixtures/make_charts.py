"""Renders the sample chart images used by the fixture pack."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

OUT = "charts"
META = {"Software": None}


def save(fig, name):
    fig.savefig(f"{OUT}/{name}", dpi=100, metadata=META)
    plt.close(fig)


def truncated_bar():
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(["North", "South", "East", "West"], [52.1, 53.4, 51.8, 54.9], color="#3b75af")
    ax.set_ylim(51, 55.5)
    ax.set_xlabel("Region")
    ax.set_ylabel("Revenue (M$)")
    save(fig, "truncated_bar.png")


def dual_axis_line():
    years = ["2018", "2019", "2020", "2021", "2022", "2023"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(years, [120, 135, 150, 170, 190, 210], color="#c0392b", marker="o")
    ax.set_ylabel("Ice cream sales (k units)")
    ax2 = ax.twinx()
    ax2.plot(years, [30, 32, 35, 39, 44, 50], color="#2471a3", marker="s")
    ax2.set_ylabel("Drownings")
    ax.set_title("Ice cream sales drive drownings")
    save(fig, "dual_axis_line.png")


def many_segment_pie():
    shares = [18, 14, 11, 9, 8, 7, 7, 6, 6, 5, 5, 4]
    labels = [f"Brand {c}" for c in "ABCDEFGHIJKL"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.pie(shares, labels=labels, startangle=90, textprops={"fontsize": 7})
    ax.set_title("Market share 2023")
    save(fig, "many_segment_pie.png")


def clean_bar():
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(["Q1", "Q2", "Q3", "Q4"], [12, 15, 11, 18], color="#5b8c5a")
    ax.set_ylim(0, 20)
    ax.set_title("Units shipped per quarter, 2023")
    ax.set_xlabel("Quarter")
    ax.set_ylabel("Units (thousands)")
    save(fig, "clean_bar.png")


if __name__ == "__main__":
    truncated_bar()
    dual_axis_line()
    many_segment_pie()
    clean_bar()
