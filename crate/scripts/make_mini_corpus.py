#!/usr/bin/env python3
"""Generate the bundled mini corpus under crates/core/data/mini.

Questions are written with inline link markup: `word@target` marks a token
that mentions a schema item (`table` or `table.column`), several targets are
separated by `|`. The script strips the markup, records token-level links and
writes Spider-layout JSON files:

    tables.json     two databases (concert_singer, pets_1)
    examples.json   50 training examples
    dev.json        held-out dev split
    dev_syn.json    dev split with every schema-mentioning token replaced
                    by a synonym
"""
import json
import os

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data", "mini")

TABLES = [
    {
        "db_id": "concert_singer",
        "table_names_original": ["stadium", "singer", "concert", "singer_in_concert"],
        "table_names": ["stadium", "singer", "concert", "singer in concert"],
        "column_names_original": [
            [-1, "*"],
            [0, "Stadium_ID"], [0, "Location"], [0, "Name"], [0, "Capacity"],
            [0, "Highest"], [0, "Lowest"], [0, "Average"],
            [1, "Singer_ID"], [1, "Name"], [1, "Country"], [1, "Song_Name"],
            [1, "Song_release_year"], [1, "Age"], [1, "Is_male"],
            [2, "concert_ID"], [2, "concert_Name"], [2, "Theme"], [2, "Stadium_ID"], [2, "Year"],
            [3, "concert_ID"], [3, "Singer_ID"],
        ],
        "column_names": [
            [-1, "*"],
            [0, "stadium id"], [0, "location"], [0, "name"], [0, "capacity"],
            [0, "highest"], [0, "lowest"], [0, "average"],
            [1, "singer id"], [1, "name"], [1, "country"], [1, "song name"],
            [1, "song release year"], [1, "age"], [1, "is male"],
            [2, "concert id"], [2, "concert name"], [2, "theme"], [2, "stadium id"], [2, "year"],
            [3, "concert id"], [3, "singer id"],
        ],
        "column_types": [
            "text", "number", "text", "text", "number", "number", "number", "number",
            "number", "text", "text", "text", "text", "number", "others",
            "number", "text", "text", "text", "text", "number", "text",
        ],
        "primary_keys": [1, 8, 15, 20],
        "foreign_keys": [[18, 1], [21, 8], [20, 15]],
    },
    {
        "db_id": "pets_1",
        "table_names_original": ["Student", "Has_Pet", "Pets"],
        "table_names": ["student", "has pet", "pets"],
        "column_names_original": [
            [-1, "*"],
            [0, "StuID"], [0, "LName"], [0, "Fname"], [0, "Age"], [0, "Sex"],
            [0, "Major"], [0, "Advisor"], [0, "city_code"],
            [1, "StuID"], [1, "PetID"],
            [2, "PetID"], [2, "PetType"], [2, "pet_age"], [2, "weight"],
        ],
        "column_names": [
            [-1, "*"],
            [0, "student id"], [0, "last name"], [0, "first name"], [0, "age"], [0, "sex"],
            [0, "major"], [0, "advisor"], [0, "city code"],
            [1, "student id"], [1, "pet id"],
            [2, "pet id"], [2, "pet type"], [2, "pet age"], [2, "weight"],
        ],
        "column_types": [
            "text", "number", "text", "text", "number", "text",
            "number", "number", "text",
            "number", "number",
            "number", "text", "number", "number",
        ],
        "primary_keys": [1, 11],
        "foreign_keys": [[9, 1], [10, 11]],
    },
]

CS = "concert_singer"
PT = "pets_1"

TRAIN = [
    (CS, "how many singers@singer do we have ?", "SELECT count(*) FROM singer"),
    (CS, "what is the total number of singers@singer ?", "SELECT count(*) FROM singer"),
    (CS, "show name@singer.name , country@singer.country , age@singer.age for all singers@singer ordered by age@singer.age from the oldest to the youngest .",
     "SELECT name, country, age FROM singer ORDER BY age DESC"),
    (CS, "what is the average , minimum , and maximum age@singer.age of all singers@singer from france ?",
     "SELECT avg(age), min(age), max(age) FROM singer WHERE country = 'France'"),
    (CS, "show the song@singer.song_name name@singer.song_name and release@singer.song_release_year year@singer.song_release_year of the youngest@singer.age singer@singer .",
     "SELECT song_name, song_release_year FROM singer ORDER BY age LIMIT 1"),
    (CS, "what are all distinct countries@singer.country where singers@singer above age@singer.age 20 are from ?",
     "SELECT DISTINCT country FROM singer WHERE age > 20"),
    (CS, "show all countries@singer.country and the number of singers@singer in each country@singer.country .",
     "SELECT country, count(*) FROM singer GROUP BY country"),
    (CS, "list all song@singer.song_name names@singer.song_name by singers@singer above the average age@singer.age .",
     "SELECT song_name FROM singer WHERE age > (SELECT avg(age) FROM singer)"),
    (CS, "show location@stadium.location and name@stadium.name for all stadiums@stadium with a capacity@stadium.capacity between 5000 and 10000 .",
     "SELECT location, name FROM stadium WHERE capacity BETWEEN 5000 AND 10000"),
    (CS, "what is the maximum capacity@stadium.capacity and the average@stadium.average of all stadiums@stadium ?",
     "SELECT max(capacity), average FROM stadium"),
    (CS, "what is the average and maximum capacity@stadium.capacity for all stadiums@stadium ?",
     "SELECT avg(capacity), max(capacity) FROM stadium"),
    (CS, "what is the name@stadium.name and capacity@stadium.capacity for the stadium@stadium with the highest average@stadium.average attendance ?",
     "SELECT name, capacity FROM stadium ORDER BY average DESC LIMIT 1"),
    (CS, "how many concerts@concert are there in year@concert.year 2014 or 2015 ?",
     "SELECT count(*) FROM concert WHERE year = 2014 OR year = 2015"),
    (CS, "show the stadium@stadium name@stadium.name and the number of concerts@concert in each stadium@concert.stadium_id .",
     "SELECT stadium.name, count(*) FROM concert JOIN stadium ON concert.stadium_id = stadium.stadium_id GROUP BY concert.stadium_id"),
    (CS, "show the stadium@stadium name@stadium.name and capacity@stadium.capacity with most number of concerts@concert in year@concert.year 2014 or after .",
     "SELECT stadium.name, stadium.capacity FROM concert JOIN stadium ON concert.stadium_id = stadium.stadium_id WHERE concert.year >= 2014 GROUP BY stadium.stadium_id ORDER BY count(*) DESC LIMIT 1"),
    (CS, "which year@concert.year has most number of concerts@concert ?",
     "SELECT year FROM concert GROUP BY year ORDER BY count(*) DESC LIMIT 1"),
    (CS, "show the stadium@stadium names@stadium.name without any concert@concert .",
     "SELECT name FROM stadium WHERE stadium_id NOT IN (SELECT stadium_id FROM concert)"),
    (CS, "show countries@singer.country where a singer@singer above age@singer.age 40 and a singer below 30 are from .",
     "SELECT country FROM singer WHERE age > 40 INTERSECT SELECT country FROM singer WHERE age < 30"),
    (CS, "show names@stadium.name for all stadiums@stadium except for stadiums having a concert@concert in year@concert.year 2014 .",
     "SELECT name FROM stadium EXCEPT SELECT stadium.name FROM concert JOIN stadium ON concert.stadium_id = stadium.stadium_id WHERE concert.year = 2014"),
    (CS, "show the concert@concert name@concert.concert_name , theme@concert.theme and number of singers@singer_in_concert in each concert .",
     "SELECT concert.concert_name, concert.theme, count(*) FROM singer_in_concert JOIN concert ON singer_in_concert.concert_id = concert.concert_id GROUP BY concert.concert_id"),
    (CS, "list singer@singer names@singer.name and number of concerts@singer_in_concert for each singer .",
     "SELECT singer.name, count(*) FROM singer_in_concert JOIN singer ON singer_in_concert.singer_id = singer.singer_id GROUP BY singer.singer_id"),
    (CS, "list all singer@singer names@singer.name in concerts@concert in year@concert.year 2014 .",
     "SELECT singer.name FROM singer_in_concert JOIN singer ON singer_in_concert.singer_id = singer.singer_id JOIN concert ON singer_in_concert.concert_id = concert.concert_id WHERE concert.year = 2014"),
    (CS, "what is the name@singer.name and country@singer.country of the singer@singer who had a song@singer.song_name having ' hey ' in its name ?",
     "SELECT name, country FROM singer WHERE song_name LIKE '%Hey%'"),
    (CS, "find the number of concerts@concert that happened in the stadium@stadium with the highest capacity@stadium.capacity .",
     "SELECT count(*) FROM concert WHERE stadium_id = (SELECT stadium_id FROM stadium ORDER BY capacity DESC LIMIT 1)"),
    (CS, "find the theme@concert.theme of concerts@concert ordered by year@concert.year .",
     "SELECT theme FROM concert ORDER BY year"),
    (CS, "how many stadiums@stadium are there ?", "SELECT count(*) FROM stadium"),
    (CS, "what is the location@stadium.location of the stadium@stadium with the lowest@stadium.lowest attendance ?",
     "SELECT location FROM stadium ORDER BY lowest LIMIT 1"),
    (CS, "list the name@singer.name of singers@singer whose age@singer.age is greater than 30 ordered by name@singer.name .",
     "SELECT name FROM singer WHERE age > 30 ORDER BY name"),
    (PT, "find the number of pets@pets whose weight@pets.weight is heavier than 10 .",
     "SELECT count(*) FROM pets WHERE weight > 10"),
    (PT, "find the weight@pets.weight of the youngest@pets.pet_age pet@pets .",
     "SELECT weight FROM pets ORDER BY pet_age LIMIT 1"),
    (PT, "find the maximum weight@pets.weight for each type@pets.pettype of pets@pets .",
     "SELECT max(weight), pettype FROM pets GROUP BY pettype"),
    (PT, "how many pets@has_pet are owned by students@student older@student.age than 20 ?",
     "SELECT count(*) FROM student JOIN has_pet ON student.stuid = has_pet.stuid WHERE student.age > 20"),
    (PT, "how many students@student are there ?", "SELECT count(*) FROM student"),
    (PT, "find the major@student.major and age@student.age of students@student who do not have any pet@has_pet .",
     "SELECT major, age FROM student WHERE stuid NOT IN (SELECT stuid FROM has_pet)"),
    (PT, "find the id@student.stuid of students@student who do not have a pet@has_pet .",
     "SELECT stuid FROM student EXCEPT SELECT stuid FROM has_pet"),
    (PT, "find the average and maximum age@pets.pet_age for each type@pets.pettype of pets@pets .",
     "SELECT avg(pet_age), max(pet_age), pettype FROM pets GROUP BY pettype"),
    (PT, "find the first@student.fname name@student.fname and age@student.age of students@student who have a pet@has_pet .",
     "SELECT DISTINCT student.fname, student.age FROM student JOIN has_pet ON student.stuid = has_pet.stuid"),
    (PT, "find the last@student.lname name@student.lname of the student@student with the highest age@student.age .",
     "SELECT lname FROM student ORDER BY age DESC LIMIT 1"),
    (PT, "list each student@student id@student.stuid and the number of pets@has_pet the student has .",
     "SELECT student.stuid, count(*) FROM student JOIN has_pet ON student.stuid = has_pet.stuid GROUP BY student.stuid"),
    (PT, "find the number of distinct types@pets.pettype of pets@pets .",
     "SELECT count(DISTINCT pettype) FROM pets"),
    (PT, "list the major@student.major of students@student ordered by age@student.age .",
     "SELECT major FROM student ORDER BY age"),
    (PT, "find the average age@student.age of students@student living in each city@student.city_code .",
     "SELECT avg(age), city_code FROM student GROUP BY city_code"),
    (PT, "find the id@pets.petid and weight@pets.weight of all pets@pets whose age@pets.pet_age is older than 1 .",
     "SELECT petid, weight FROM pets WHERE pet_age > 1"),
    (PT, "which major@student.major has the most students@student ?",
     "SELECT major FROM student GROUP BY major ORDER BY count(*) DESC LIMIT 1"),
    (PT, "find the number of students@student whose age@student.age is older than the average age .",
     "SELECT count(*) FROM student WHERE age > (SELECT avg(age) FROM student)"),
    (PT, "list the first@student.fname name@student.fname of all female@student.sex students@student .",
     "SELECT fname FROM student WHERE sex = 'F'"),
    (PT, "find the major@student.major with more than 3 students@student .",
     "SELECT major FROM student GROUP BY major HAVING count(*) > 3"),
    (PT, "what is the average weight@pets.weight of pets@pets heavier than 5 ?",
     "SELECT avg(weight) FROM pets WHERE weight > 5"),
    (PT, "find the type@pets.pettype and weight@pets.weight of the youngest@pets.pet_age pet@pets .",
     "SELECT pettype, weight FROM pets ORDER BY pet_age LIMIT 1"),
    (PT, "list the city@student.city_code and advisor@student.advisor of students@student whose major@student.major is 600 .",
     "SELECT city_code, advisor FROM student WHERE major = 600"),
]

DEV = [
    (CS, "how many concerts@concert are there ?", "SELECT count(*) FROM concert"),
    (CS, "show the name@singer.name and age@singer.age of all singers@singer ordered by age@singer.age .",
     "SELECT name, age FROM singer ORDER BY age"),
    (CS, "what is the average age@singer.age of all singers@singer ?", "SELECT avg(age) FROM singer"),
    (CS, "show the location@stadium.location of all stadiums@stadium with capacity@stadium.capacity above 5000 .",
     "SELECT location FROM stadium WHERE capacity > 5000"),
    (CS, "show all countries@singer.country and the average age@singer.age of singers@singer in each country@singer.country .",
     "SELECT country, avg(age) FROM singer GROUP BY country"),
    (CS, "what is the name@stadium.name of the stadium@stadium with the highest capacity@stadium.capacity ?",
     "SELECT name FROM stadium ORDER BY capacity DESC LIMIT 1"),
    (CS, "show the theme@concert.theme of all concerts@concert in year@concert.year 2014 .",
     "SELECT theme FROM concert WHERE year = 2014"),
    (CS, "list the distinct countries@singer.country of singers@singer .", "SELECT DISTINCT country FROM singer"),
    (CS, "show the name@singer.name of singers@singer whose age@singer.age is below 30 .",
     "SELECT name FROM singer WHERE age < 30"),
    (CS, "how many singers@singer are from each country@singer.country ?",
     "SELECT country, count(*) FROM singer GROUP BY country"),
    (CS, "list the theme@concert.theme of concerts@concert ordered by year@concert.year .",
     "SELECT theme FROM concert ORDER BY year"),
    (PT, "how many pets@pets are there ?", "SELECT count(*) FROM pets"),
    (PT, "find the average age@student.age of all students@student .", "SELECT avg(age) FROM student"),
    (PT, "find the maximum weight@pets.weight of pets@pets .", "SELECT max(weight) FROM pets"),
    (PT, "list the last@student.lname name@student.lname of students@student ordered by age@student.age .",
     "SELECT lname FROM student ORDER BY age"),
    (PT, "find the number of students@student in each major@student.major .",
     "SELECT major, count(*) FROM student GROUP BY major"),
    (PT, "find the type@pets.pettype of the heaviest@pets.weight pet@pets .",
     "SELECT pettype FROM pets ORDER BY weight DESC LIMIT 1"),
    (PT, "find the id@pets.petid of pets@pets whose weight@pets.weight is above 10 .",
     "SELECT petid FROM pets WHERE weight > 10"),
    (PT, "find the first@student.fname name@student.fname of students@student whose age@student.age is above 20 .",
     "SELECT fname FROM student WHERE age > 20"),
    (PT, "find the average weight@pets.weight of pets@pets for each type@pets.pettype .",
     "SELECT avg(weight), pettype FROM pets GROUP BY pettype"),
]

# Lemma -> synonym used when building the synonym-substituted dev split.
SYNONYMS = {
    "singer": "musician",
    "concert": "performance",
    "stadium": "arena",
    "name": "title",
    "age": "maturity",
    "country": "nation",
    "location": "place",
    "capacity": "size",
    "theme": "topic",
    "year": "season",
    "pet": "animal",
    "student": "pupil",
    "weight": "mass",
    "type": "kind",
    "major": "specialization",
    "last": "family",
    "first": "given",
    "id": "identifier",
    "heaviest": "bulkiest",
}


def lemma(word):
    if word.endswith("ies"):
        return word[:-3] + "y", "ies"
    if word.endswith("s") and word[:-1] in SYNONYMS:
        return word[:-1], "s"
    return word, ""


def substitute(word):
    base, suffix = lemma(word)
    if base not in SYNONYMS:
        raise SystemExit(f"no synonym for {word!r}")
    syn = SYNONYMS[base]
    if suffix == "ies" or suffix == "s":
        return syn + "s"
    return syn


def parse_markup(text):
    tokens, links = [], []
    for i, raw in enumerate(text.split()):
        if "@" in raw and len(raw) > 1:
            word, targets = raw.split("@", 1)
            tokens.append(word)
            for t in targets.split("|"):
                links.append([i, t])
        else:
            tokens.append(raw)
    return tokens, links


def build(rows, split, synonym=False):
    out = []
    for n, (db, q, sql) in enumerate(rows):
        tokens, links = parse_markup(q)
        if synonym:
            linked = {i for i, _ in links}
            tokens = [substitute(w) if i in linked else w for i, w in enumerate(tokens)]
        out.append({
            "id": f"{split}-{n:03d}",
            "db_id": db,
            "question": " ".join(tokens),
            "query": sql,
            "links": links,
        })
    return out


def main():
    os.makedirs(OUT, exist_ok=True)
    with open(os.path.join(OUT, "tables.json"), "w") as f:
        json.dump(TABLES, f, indent=1)
    for name, rows, split, syn in [
        ("examples.json", TRAIN, "train", False),
        ("dev.json", DEV, "dev", False),
        ("dev_syn.json", DEV, "devsyn", True),
    ]:
        with open(os.path.join(OUT, name), "w") as f:
            json.dump(build(rows, split, syn), f, indent=1)
    print(f"train={len(TRAIN)} dev={len(DEV)}")


if __name__ == "__main__":
    main()
